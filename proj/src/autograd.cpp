#include "sbd/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace sbd {

Parameter& ParamStore::add(std::string name, Tensor init, bool trainable) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    storage_.emplace_back(std::move(name), std::move(init), trainable);
    return storage_.back();
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto& p : storage_)
        if (p.name == name) return &p;
    return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (auto& p : storage_)
        if (p.name == name) return &p;
    return nullptr;
}

std::vector<Parameter*> ParamStore::all() {
    std::vector<Parameter*> out;
    out.reserve(storage_.size());
    for (auto& p : storage_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> ParamStore::all() const {
    std::vector<const Parameter*> out;
    out.reserve(storage_.size());
    for (auto& p : storage_) out.push_back(&p);
    return out;
}

void ParamStore::zero_grads() {
    for (auto& p : storage_) p.zero_grad();
}

const Tensor& Var::value() const { return tape->node(id).value; }
const std::vector<int>& Var::shape() const { return value().shape; }

Var Tape::constant(Tensor v) {
    nodes_.push_back(Node{std::move(v), Tensor{}, false, nullptr, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
    nodes_.push_back(Node{p.value, Tensor{}, p.trainable, nullptr, &p});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::make(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad,
                          requires_grad ? std::move(backprop) : nullptr, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
}

void Tape::backward(Var root) {
    if (root.tape != this) throw std::invalid_argument("backward: var from a different tape");
    if (node(root.id).value.numel() != 1) throw std::invalid_argument("backward root must be scalar");
    if (used_) throw std::logic_error("tape already back-propagated");
    used_ = true;
    if (!node(root.id).requires_grad) return;
    grad(root.id)(0) = 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = node(id);
        if (!n.requires_grad || n.grad.data.empty()) continue;
        if (n.backprop) n.backprop(*this);
        if (n.bound && n.bound->trainable) {
            Tensor& g = n.bound->gradient;
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
    }
}

namespace {

bool wants(Tape& t, int id) { return t.node(id).requires_grad; }

bool any_grad(std::initializer_list<Var> vs) {
    for (Var v : vs)
        if (v.tape->node(v.id).requires_grad) return true;
    return false;
}

void check_same_tape(std::initializer_list<Var> vs) {
    Tape* t = nullptr;
    for (Var v : vs) {
        if (!v.tape || v.id < 0) throw std::invalid_argument("op on detached var");
        if (!t) t = v.tape;
        if (v.tape != t) throw std::invalid_argument("op mixes vars from different tapes");
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* opname) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(opname) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

void axpy(Tensor& dst, const Tensor& src, double c = 1.0) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += c * src.data[i];
}

/// Creates the output node, then installs a backprop closure built with the
/// output id. make_closure(out_id) must return void(Tape&).
template <typename F>
Var finish(Tape& t, Tensor value, bool rg, F&& make_closure) {
    Var out = t.make(std::move(value), rg, nullptr);
    if (rg) t.node(out.id).backprop = make_closure(out.id);
    return out;
}

} // namespace

Var add(Var a, Var b) {
    check_same_tape({a, b});
    require_same_shape(a.value(), b.value(), "add");
    Tensor y = a.value();
    axpy(y, b.value());
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return finish(t, std::move(y), any_grad({a, b}), [ia, ib](int oid) {
        return [ia, ib, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            if (wants(t, ia)) axpy(t.grad(ia), dy);
            if (wants(t, ib)) axpy(t.grad(ib), dy);
        };
    });
}

Var sub(Var a, Var b) {
    check_same_tape({a, b});
    require_same_shape(a.value(), b.value(), "sub");
    Tensor y = a.value();
    axpy(y, b.value(), -1.0);
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return finish(t, std::move(y), any_grad({a, b}), [ia, ib](int oid) {
        return [ia, ib, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            if (wants(t, ia)) axpy(t.grad(ia), dy);
            if (wants(t, ib)) axpy(t.grad(ib), dy, -1.0);
        };
    });
}

Var mul(Var a, Var b) {
    check_same_tape({a, b});
    require_same_shape(a.value(), b.value(), "mul");
    Tensor y = a.value();
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] *= b.value().data[i];
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return finish(t, std::move(y), any_grad({a, b}), [ia, ib](int oid) {
        return [ia, ib, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& av = t.node(ia).value;
            const Tensor& bv = t.node(ib).value;
            if (wants(t, ia)) {
                Tensor& da = t.grad(ia);
                for (size_t i = 0; i < da.data.size(); ++i) da.data[i] += dy.data[i] * bv.data[i];
            }
            if (wants(t, ib)) {
                Tensor& db = t.grad(ib);
                for (size_t i = 0; i < db.data.size(); ++i) db.data[i] += dy.data[i] * av.data[i];
            }
        };
    });
}

Var divide(Var a, Var b) {
    check_same_tape({a, b});
    require_same_shape(a.value(), b.value(), "divide");
    Tensor y = a.value();
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] /= b.value().data[i];
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return finish(t, std::move(y), any_grad({a, b}), [ia, ib](int oid) {
        return [ia, ib, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& av = t.node(ia).value;
            const Tensor& bv = t.node(ib).value;
            if (wants(t, ia)) {
                Tensor& da = t.grad(ia);
                for (size_t i = 0; i < da.data.size(); ++i) da.data[i] += dy.data[i] / bv.data[i];
            }
            if (wants(t, ib)) {
                Tensor& db = t.grad(ib);
                for (size_t i = 0; i < db.data.size(); ++i)
                    db.data[i] -= dy.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
            }
        };
    });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
    Tensor y = a.value();
    for (double& v : y.data) v *= c;
    Tape& t = *a.tape;
    const int ia = a.id;
    return finish(t, std::move(y), any_grad({a}), [ia, c](int oid) {
        return [ia, c, oid](Tape& t) {
            if (wants(t, ia)) axpy(t.grad(ia), t.node(oid).grad, c);
        };
    });
}

Var scale_by(Var a, Var s) {
    check_same_tape({a, s});
    if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be scalar, got " + s.value().shape_str());
    const double c = s.value()(0);
    Tensor y = a.value();
    for (double& v : y.data) v *= c;
    Tape& t = *a.tape;
    const int ia = a.id, is = s.id;
    return finish(t, std::move(y), any_grad({a, s}), [ia, is](int oid) {
        return [ia, is, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const double c = t.node(is).value(0);
            if (wants(t, ia)) axpy(t.grad(ia), dy, c);
            if (wants(t, is)) {
                const Tensor& av = t.node(ia).value;
                double acc = 0.0;
                for (size_t i = 0; i < dy.data.size(); ++i) acc += dy.data[i] * av.data[i];
                t.grad(is)(0) += acc;
            }
        };
    });
}

Var elem(Var a, int64_t flat_index) {
    if (flat_index < 0 || flat_index >= a.numel())
        throw std::out_of_range("elem: index " + std::to_string(flat_index) + " out of " + a.value().shape_str());
    Tensor y = Tensor::scalar(a.value().data[static_cast<size_t>(flat_index)]);
    Tape& t = *a.tape;
    const int ia = a.id;
    return finish(t, std::move(y), any_grad({a}), [ia, flat_index](int oid) {
        return [ia, flat_index, oid](Tape& t) {
            if (wants(t, ia)) t.grad(ia).data[static_cast<size_t>(flat_index)] += t.node(oid).grad(0);
        };
    });
}

Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no parts");
    Tape& t = *parts[0].tape;
    std::vector<double> data;
    std::vector<int> ids;
    std::vector<int64_t> sizes;
    bool rg = false;
    for (Var p : parts) {
        check_same_tape({parts[0], p});
        if (p.value().rank() != 1) throw std::invalid_argument("concat expects 1-D parts, got " + p.value().shape_str());
        data.insert(data.end(), p.value().data.begin(), p.value().data.end());
        ids.push_back(p.id);
        sizes.push_back(p.numel());
        rg = rg || wants(t, p.id);
    }
    const int total = static_cast<int>(data.size());
    Tensor y = Tensor::from({total}, std::move(data));
    return finish(t, std::move(y), rg, [ids, sizes](int oid) {
        return [ids, sizes, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            int64_t off = 0;
            for (size_t k = 0; k < ids.size(); ++k) {
                if (wants(t, ids[k])) {
                    Tensor& g = t.grad(ids[k]);
                    for (int64_t i = 0; i < sizes[k]; ++i) g.data[static_cast<size_t>(i)] += dy.data[static_cast<size_t>(off + i)];
                }
                off += sizes[k];
            }
        };
    });
}

Var matmul(Var a, Var b) {
    check_same_tape({a, b});
    Tensor y = matmul(a.value(), b.value());
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return finish(t, std::move(y), any_grad({a, b}), [ia, ib](int oid) {
        return [ia, ib, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& av = t.node(ia).value;
            const Tensor& bv = t.node(ib).value;
            const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
            if (wants(t, ia)) {
                Tensor& da = t.grad(ia); // dA = dY B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += dy(i, j) * bv(p, j);
                        da(i, p) += s;
                    }
            }
            if (wants(t, ib)) {
                Tensor& db = t.grad(ib); // dB = A^T dY
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i) s += av(i, p) * dy(i, j);
                        db(p, j) += s;
                    }
            }
        };
    });
}

Var transpose(Var a) {
    const Tensor& av = a.value();
    if (av.rank() != 2) throw std::invalid_argument("transpose expects rank-2, got " + av.shape_str());
    const int m = av.dim(0), n = av.dim(1);
    Tensor y({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) y(j, i) = av(i, j);
    Tape& t = *a.tape;
    const int ia = a.id;
    return finish(t, std::move(y), any_grad({a}), [ia, m, n](int oid) {
        return [ia, m, n, oid](Tape& t) {
            if (!wants(t, ia)) return;
            const Tensor& dy = t.node(oid).grad;
            Tensor& da = t.grad(ia);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) da(i, j) += dy(j, i);
        };
    });
}

Var reshape(Var a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: " + a.value().shape_str() + " -> " + shape_to_string(shape) +
                                    " changes element count");
    Tensor y = Tensor::from(shape, a.value().data);
    Tape& t = *a.tape;
    const int ia = a.id;
    return finish(t, std::move(y), any_grad({a}), [ia](int oid) {
        return [ia, oid](Tape& t) {
            if (wants(t, ia)) axpy(t.grad(ia), t.node(oid).grad);
        };
    });
}

Var linear(Var w, Var b, Var x) {
    check_same_tape({w, b, x});
    const Tensor& wv = w.value();
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (wv.rank() != 2 || bv.rank() != 1 || wv.dim(0) != bv.dim(0))
        throw std::invalid_argument("linear: weight " + wv.shape_str() + " incompatible with bias " + bv.shape_str());
    const int out = wv.dim(0), in = wv.dim(1);
    Tensor y;
    if (xv.rank() == 1) {
        y = linear_vec(wv, bv, xv);
    } else if (xv.rank() == 2 && xv.dim(1) == in) {
        const int n = xv.dim(0);
        y = Tensor({n, out});
        for (int r = 0; r < n; ++r)
            for (int o = 0; o < out; ++o) {
                double s = bv(o);
                for (int i = 0; i < in; ++i) s += wv(o, i) * xv(r, i);
                y(r, o) = s;
            }
    } else {
        throw std::invalid_argument("linear: weight " + wv.shape_str() + " incompatible with input " + xv.shape_str());
    }
    Tape& t = *w.tape;
    const int iw = w.id, ib = b.id, ix = x.id;
    return finish(t, std::move(y), any_grad({w, b, x}), [iw, ib, ix, out, in](int oid) {
        return [iw, ib, ix, out, in, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& wv = t.node(iw).value;
            const Tensor& xv = t.node(ix).value;
            const int n = xv.rank() == 1 ? 1 : xv.dim(0);
            auto xat = [&](int r, int i) { return xv.rank() == 1 ? xv(i) : xv(r, i); };
            auto dyat = [&](int r, int o) { return dy.rank() == 1 ? dy(o) : dy(r, o); };
            if (wants(t, iw)) {
                Tensor& dw = t.grad(iw);
                for (int r = 0; r < n; ++r)
                    for (int o = 0; o < out; ++o) {
                        const double g = dyat(r, o);
                        if (g == 0.0) continue;
                        for (int i = 0; i < in; ++i) dw(o, i) += g * xat(r, i);
                    }
            }
            if (wants(t, ib)) {
                Tensor& db = t.grad(ib);
                for (int r = 0; r < n; ++r)
                    for (int o = 0; o < out; ++o) db(o) += dyat(r, o);
            }
            if (wants(t, ix)) {
                Tensor& dx = t.grad(ix);
                for (int r = 0; r < n; ++r)
                    for (int o = 0; o < out; ++o) {
                        const double g = dyat(r, o);
                        if (g == 0.0) continue;
                        for (int i = 0; i < in; ++i) {
                            if (dx.rank() == 1)
                                dx(i) += g * wv(o, i);
                            else
                                dx(r, i) += g * wv(o, i);
                        }
                    }
            }
        };
    });
}

Var conv3x3(Var w, Var b, Var x) {
    check_same_tape({w, b, x});
    Tensor y = conv3x3(w.value(), b.value(), x.value());
    Tape& t = *w.tape;
    const int iw = w.id, ib = b.id, ix = x.id;
    return finish(t, std::move(y), any_grad({w, b, x}), [iw, ib, ix](int oid) {
        return [iw, ib, ix, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& wv = t.node(iw).value;
            const Tensor& xv = t.node(ix).value;
            const int co = wv.dim(0), ci = wv.dim(1), h = xv.dim(1), wd = xv.dim(2);
            const bool gw = wants(t, iw), gx = wants(t, ix), gb = wants(t, ib);
            if (gb) {
                Tensor& db = t.grad(ib);
                for (int oc = 0; oc < co; ++oc) {
                    double s = 0.0;
                    const double* p = &dy.data[static_cast<size_t>(oc) * h * wd];
                    for (int i = 0; i < h * wd; ++i) s += p[i];
                    db(oc) += s;
                }
            }
            if (!gw && !gx) return;
            Tensor* dw = gw ? &t.grad(iw) : nullptr;
            Tensor* dx = gx ? &t.grad(ix) : nullptr;
            for (int oc = 0; oc < co; ++oc) {
                const double* dout = &dy.data[static_cast<size_t>(oc) * h * wd];
                for (int ic = 0; ic < ci; ++ic) {
                    const double* in = &xv.data[static_cast<size_t>(ic) * h * wd];
                    double* dxp = gx ? &dx->data[static_cast<size_t>(ic) * h * wd] : nullptr;
                    for (int du = -1; du <= 1; ++du) {
                        for (int dv = -1; dv <= 1; ++dv) {
                            const double kv = wv(oc, ic, du + 1, dv + 1);
                            const int r0 = std::max(0, -du), r1 = std::min(h, h - du);
                            const int c0 = std::max(0, -dv), c1 = std::min(wd, wd - dv);
                            double wacc = 0.0;
                            for (int r = r0; r < r1; ++r) {
                                const double* drow = dout + static_cast<size_t>(r) * wd;
                                const double* irow = in + static_cast<size_t>(r + du) * wd + dv;
                                double* dxrow = gx ? dxp + static_cast<size_t>(r + du) * wd + dv : nullptr;
                                for (int c = c0; c < c1; ++c) {
                                    if (gw) wacc += drow[c] * irow[c];
                                    if (gx) dxrow[c] += kv * drow[c];
                                }
                            }
                            if (gw) (*dw)(oc, ic, du + 1, dv + 1) += wacc;
                        }
                    }
                }
            }
        };
    });
}

Var conv1x1(Var w, Var b, Var x) {
    check_same_tape({w, b, x});
    Tensor y = conv1x1(w.value(), b.value(), x.value());
    Tape& t = *w.tape;
    const int iw = w.id, ib = b.id, ix = x.id;
    return finish(t, std::move(y), any_grad({w, b, x}), [iw, ib, ix](int oid) {
        return [iw, ib, ix, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& wv = t.node(iw).value;
            const Tensor& xv = t.node(ix).value;
            const int co = wv.dim(0), ci = wv.dim(1), hw = xv.dim(1) * xv.dim(2);
            if (wants(t, ib)) {
                Tensor& db = t.grad(ib);
                for (int oc = 0; oc < co; ++oc) {
                    double s = 0.0;
                    const double* p = &dy.data[static_cast<size_t>(oc) * hw];
                    for (int i = 0; i < hw; ++i) s += p[i];
                    db(oc) += s;
                }
            }
            const bool gw = wants(t, iw), gx = wants(t, ix);
            if (!gw && !gx) return;
            for (int oc = 0; oc < co; ++oc) {
                const double* dout = &dy.data[static_cast<size_t>(oc) * hw];
                for (int ic = 0; ic < ci; ++ic) {
                    const double* in = &xv.data[static_cast<size_t>(ic) * hw];
                    if (gw) {
                        double s = 0.0;
                        for (int i = 0; i < hw; ++i) s += dout[i] * in[i];
                        t.grad(iw)(oc, ic) += s;
                    }
                    if (gx) {
                        const double kv = wv(oc, ic);
                        double* dxp = &t.grad(ix).data[static_cast<size_t>(ic) * hw];
                        for (int i = 0; i < hw; ++i) dxp[i] += kv * dout[i];
                    }
                }
            }
        };
    });
}

Var relu(Var x) {
    Tensor y = relu(x.value());
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            const Tensor& xv = t.node(ix).value;
            Tensor& dx = t.grad(ix);
            for (size_t i = 0; i < dx.data.size(); ++i)
                if (xv.data[i] > 0.0) dx.data[i] += dy.data[i];
        };
    });
}

Var sigmoid(Var x) {
    Tensor y = x.value();
    for (double& v : y.data) v = 1.0 / (1.0 + std::exp(-v));
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            const Tensor& yv = t.node(oid).value;
            Tensor& dx = t.grad(ix);
            for (size_t i = 0; i < dx.data.size(); ++i)
                dx.data[i] += dy.data[i] * yv.data[i] * (1.0 - yv.data[i]);
        };
    });
}

Var absval(Var x) {
    Tensor y = x.value();
    for (double& v : y.data) v = std::fabs(v);
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            const Tensor& xv = t.node(ix).value;
            Tensor& dx = t.grad(ix);
            for (size_t i = 0; i < dx.data.size(); ++i) {
                const double s = xv.data[i] > 0.0 ? 1.0 : (xv.data[i] < 0.0 ? -1.0 : 0.0);
                dx.data[i] += s * dy.data[i];
            }
        };
    });
}

Var softmax(Var x) {
    Tensor y = softmax_vec(x.value());
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            const Tensor& yv = t.node(oid).value;
            Tensor& dx = t.grad(ix);
            double dot = 0.0;
            for (size_t i = 0; i < yv.data.size(); ++i) dot += dy.data[i] * yv.data[i];
            for (size_t i = 0; i < yv.data.size(); ++i) dx.data[i] += yv.data[i] * (dy.data[i] - dot);
        };
    });
}

Var gap(Var x) {
    Tensor y = gap_chw(x.value());
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            Tensor& dx = t.grad(ix);
            const int c = dx.dim(0), hw = dx.dim(1) * dx.dim(2);
            const double inv = 1.0 / hw;
            for (int ch = 0; ch < c; ++ch) {
                const double g = dy(ch) * inv;
                double* p = &dx.data[static_cast<size_t>(ch) * hw];
                for (int i = 0; i < hw; ++i) p[i] += g;
            }
        };
    });
}

Var avgpool2(Var x) {
    Tensor y = avgpool2(x.value());
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            Tensor& dx = t.grad(ix);
            const int c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const double g = 0.25 * dy(ch, i, j);
                        dx(ch, 2 * i, 2 * j) += g;
                        dx(ch, 2 * i, 2 * j + 1) += g;
                        dx(ch, 2 * i + 1, 2 * j) += g;
                        dx(ch, 2 * i + 1, 2 * j + 1) += g;
                    }
        };
    });
}

Var maxpool2(Var x) {
    Tensor y = maxpool2(x.value());
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            const Tensor& xv = t.node(ix).value;
            Tensor& dx = t.grad(ix);
            const int c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        // route to the first maximum in scan order
                        int bi = 2 * i, bj = 2 * j;
                        double best = xv(ch, bi, bj);
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b)
                                if (xv(ch, 2 * i + a, 2 * j + b) > best) {
                                    best = xv(ch, 2 * i + a, 2 * j + b);
                                    bi = 2 * i + a;
                                    bj = 2 * j + b;
                                }
                        dx(ch, bi, bj) += dy(ch, i, j);
                    }
        };
    });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data) s += v;
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, Tensor::scalar(s), any_grad({x}), [ix](int oid) {
        return [ix, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const double g = t.node(oid).grad(0);
            Tensor& dx = t.grad(ix);
            for (double& v : dx.data) v += g;
        };
    });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Var repeat_row(Var v, int n) {
    const Tensor& vv = v.value();
    if (vv.rank() != 1) throw std::invalid_argument("repeat_row expects 1-D, got " + vv.shape_str());
    if (n < 1) throw std::invalid_argument("repeat_row: n must be >= 1");
    const int d = vv.dim(0);
    Tensor y({n, d});
    for (int r = 0; r < n; ++r)
        for (int i = 0; i < d; ++i) y(r, i) = vv(i);
    Tape& t = *v.tape;
    const int iv = v.id;
    return finish(t, std::move(y), any_grad({v}), [iv, n, d](int oid) {
        return [iv, n, d, oid](Tape& t) {
            if (!wants(t, iv)) return;
            const Tensor& dy = t.node(oid).grad;
            Tensor& dv = t.grad(iv);
            for (int r = 0; r < n; ++r)
                for (int i = 0; i < d; ++i) dv(i) += dy(r, i);
        };
    });
}

Var gather_rows(Var x, std::vector<int> ids) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("gather_rows expects rank-2, got " + xv.shape_str());
    const int d = xv.dim(1);
    Tensor y({static_cast<int>(ids.size()), d});
    for (size_t m = 0; m < ids.size(); ++m) {
        if (ids[m] < 0 || ids[m] >= xv.dim(0)) throw std::out_of_range("gather_rows: row out of range");
        for (int i = 0; i < d; ++i) y(static_cast<int>(m), i) = xv(ids[m], i);
    }
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix, ids = std::move(ids), d](int oid) {
        return [ix, ids, d, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            Tensor& dx = t.grad(ix);
            for (size_t m = 0; m < ids.size(); ++m)
                for (int i = 0; i < d; ++i) dx(ids[m], i) += dy(static_cast<int>(m), i);
        };
    });
}

Var slice_row(Var x, int row) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || row < 0 || row >= xv.dim(0))
        throw std::out_of_range("slice_row: row " + std::to_string(row) + " of " + xv.shape_str());
    const int d = xv.dim(1);
    Tensor y({d});
    for (int i = 0; i < d; ++i) y(i) = xv(row, i);
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix, row, d](int oid) {
        return [ix, row, d, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            Tensor& dx = t.grad(ix);
            for (int i = 0; i < d; ++i) dx(row, i) += dy(i);
        };
    });
}

namespace {

Var minmax_impl(Var a, Var b, bool take_max) {
    check_same_tape({a, b});
    require_same_shape(a.value(), b.value(), take_max ? "maximum" : "minimum");
    Tensor y = a.value();
    for (size_t i = 0; i < y.data.size(); ++i) {
        const double bv = b.value().data[i];
        if (take_max ? (bv > y.data[i]) : (bv < y.data[i])) y.data[i] = bv;
    }
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return finish(t, std::move(y), any_grad({a, b}), [ia, ib, take_max](int oid) {
        return [ia, ib, take_max, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& av = t.node(ia).value;
            const Tensor& bv = t.node(ib).value;
            const bool ga = wants(t, ia), gb = wants(t, ib);
            for (size_t i = 0; i < dy.data.size(); ++i) {
                // ties route to the first argument
                const bool use_a = take_max ? (av.data[i] >= bv.data[i]) : (av.data[i] <= bv.data[i]);
                if (use_a) {
                    if (ga) t.grad(ia).data[i] += dy.data[i];
                } else if (gb) {
                    t.grad(ib).data[i] += dy.data[i];
                }
            }
        };
    });
}

} // namespace

Var minimum(Var a, Var b) { return minmax_impl(a, b, false); }
Var maximum(Var a, Var b) { return minmax_impl(a, b, true); }

Var mul_channelwise(Var x, Var s) {
    check_same_tape({x, s});
    const Tensor& xv = x.value();
    const Tensor& sv = s.value();
    if (xv.rank() != 3 || sv.rank() != 1 || sv.dim(0) != xv.dim(0))
        throw std::invalid_argument("mul_channelwise: " + xv.shape_str() + " vs " + sv.shape_str());
    const int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor y = xv;
    for (int ch = 0; ch < c; ++ch) {
        double* p = &y.data[static_cast<size_t>(ch) * hw];
        for (int i = 0; i < hw; ++i) p[i] *= sv(ch);
    }
    Tape& t = *x.tape;
    const int ix = x.id, is = s.id;
    return finish(t, std::move(y), any_grad({x, s}), [ix, is, c, hw](int oid) {
        return [ix, is, c, hw, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& xv = t.node(ix).value;
            const Tensor& sv = t.node(is).value;
            for (int ch = 0; ch < c; ++ch) {
                const double* d = &dy.data[static_cast<size_t>(ch) * hw];
                const double* xp = &xv.data[static_cast<size_t>(ch) * hw];
                if (wants(t, ix)) {
                    double* g = &t.grad(ix).data[static_cast<size_t>(ch) * hw];
                    for (int i = 0; i < hw; ++i) g[i] += sv(ch) * d[i];
                }
                if (wants(t, is)) {
                    double acc = 0.0;
                    for (int i = 0; i < hw; ++i) acc += d[i] * xp[i];
                    t.grad(is)(ch) += acc;
                }
            }
        };
    });
}

Var mul_spatial(Var x, Var m) {
    check_same_tape({x, m});
    const Tensor& xv = x.value();
    const Tensor& mv = m.value();
    if (xv.rank() != 3 || mv.rank() != 2 || mv.dim(0) != xv.dim(1) || mv.dim(1) != xv.dim(2))
        throw std::invalid_argument("mul_spatial: " + xv.shape_str() + " vs " + mv.shape_str());
    const int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
    Tensor y = xv;
    for (int ch = 0; ch < c; ++ch) {
        double* p = &y.data[static_cast<size_t>(ch) * hw];
        for (int i = 0; i < hw; ++i) p[i] *= mv.data[static_cast<size_t>(i)];
    }
    Tape& t = *x.tape;
    const int ix = x.id, im = m.id;
    return finish(t, std::move(y), any_grad({x, m}), [ix, im, c, hw](int oid) {
        return [ix, im, c, hw, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& xv = t.node(ix).value;
            const Tensor& mv = t.node(im).value;
            for (int ch = 0; ch < c; ++ch) {
                const double* d = &dy.data[static_cast<size_t>(ch) * hw];
                const double* xp = &xv.data[static_cast<size_t>(ch) * hw];
                if (wants(t, ix)) {
                    double* g = &t.grad(ix).data[static_cast<size_t>(ch) * hw];
                    for (int i = 0; i < hw; ++i) g[i] += mv.data[static_cast<size_t>(i)] * d[i];
                }
                if (wants(t, im)) {
                    double* g = t.grad(im).data.data();
                    for (int i = 0; i < hw; ++i) g[i] += d[i] * xp[i];
                }
            }
        };
    });
}

Var spatial_stats(Var x) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw std::invalid_argument("spatial_stats expects [C,H,W], got " + xv.shape_str());
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2), hw = h * w;
    Tensor y({2, h, w});
    std::vector<int> argmax(static_cast<size_t>(hw), 0);
    for (int i = 0; i < hw; ++i) {
        double s = 0.0, mx = xv.data[static_cast<size_t>(i)];
        int am = 0;
        for (int ch = 0; ch < c; ++ch) {
            const double v = xv.data[static_cast<size_t>(ch) * hw + i];
            s += v;
            if (v > mx) {
                mx = v;
                am = ch;
            }
        }
        y.data[static_cast<size_t>(i)] = s / c;
        y.data[static_cast<size_t>(hw + i)] = mx;
        argmax[static_cast<size_t>(i)] = am;
    }
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, std::move(y), any_grad({x}), [ix, c, hw, argmax = std::move(argmax)](int oid) {
        return [ix, c, hw, argmax, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const Tensor& dy = t.node(oid).grad;
            Tensor& dx = t.grad(ix);
            const double inv = 1.0 / c;
            for (int i = 0; i < hw; ++i) {
                const double gm = dy.data[static_cast<size_t>(i)] * inv;
                for (int ch = 0; ch < c; ++ch) dx.data[static_cast<size_t>(ch) * hw + i] += gm;
                dx.data[static_cast<size_t>(argmax[static_cast<size_t>(i)]) * hw + i] +=
                    dy.data[static_cast<size_t>(hw + i)];
            }
        };
    });
}

Var cross_entropy_rows(Var logits, std::vector<int> targets) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || static_cast<int>(targets.size()) != lv.dim(0))
        throw std::invalid_argument("cross_entropy_rows: logits " + lv.shape_str() + " vs " +
                                    std::to_string(targets.size()) + " targets");
    const int n = lv.dim(0), c = lv.dim(1);
    Tensor y({n});
    for (int r = 0; r < n; ++r) {
        if (targets[static_cast<size_t>(r)] < 0 || targets[static_cast<size_t>(r)] >= c)
            throw std::out_of_range("cross_entropy_rows: target class out of range");
        double mx = lv(r, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, lv(r, j));
        double lse = 0.0;
        for (int j = 0; j < c; ++j) lse += std::exp(lv(r, j) - mx);
        y(r) = mx + std::log(lse) - lv(r, targets[static_cast<size_t>(r)]);
    }
    Tape& t = *logits.tape;
    const int il = logits.id;
    return finish(t, std::move(y), any_grad({logits}), [il, targets = std::move(targets), n, c](int oid) {
        return [il, targets, n, c, oid](Tape& t) {
            if (!wants(t, il)) return;
            const Tensor& dy = t.node(oid).grad;
            const Tensor& lv = t.node(il).value;
            Tensor& dl = t.grad(il);
            for (int r = 0; r < n; ++r) {
                const double g = dy(r);
                if (g == 0.0) continue;
                double mx = lv(r, 0);
                for (int j = 1; j < c; ++j) mx = std::max(mx, lv(r, j));
                double z = 0.0;
                for (int j = 0; j < c; ++j) z += std::exp(lv(r, j) - mx);
                for (int j = 0; j < c; ++j) {
                    const double p = std::exp(lv(r, j) - mx) / z;
                    dl(r, j) += g * (p - (j == targets[static_cast<size_t>(r)] ? 1.0 : 0.0));
                }
            }
        };
    });
}

Var bce_with_logits_mean(Var logits, Tensor targets) {
    const Tensor& lv = logits.value();
    require_same_shape(lv, targets, "bce_with_logits_mean");
    double acc = 0.0;
    for (size_t i = 0; i < lv.data.size(); ++i) {
        const double xi = lv.data[i], yi = targets.data[i];
        acc += std::max(xi, 0.0) - xi * yi + std::log1p(std::exp(-std::fabs(xi)));
    }
    const double n = static_cast<double>(lv.numel());
    Tape& t = *logits.tape;
    const int il = logits.id;
    return finish(t, Tensor::scalar(acc / n), any_grad({logits}), [il, targets = std::move(targets), n](int oid) {
        return [il, targets, n, oid](Tape& t) {
            if (!wants(t, il)) return;
            const double g = t.node(oid).grad(0) / n;
            const Tensor& lv = t.node(il).value;
            Tensor& dl = t.grad(il);
            for (size_t i = 0; i < lv.data.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-lv.data[i]));
                dl.data[i] += g * (s - targets.data[i]);
            }
        };
    });
}

Var weighted_sum(Var x, Tensor weights) {
    require_same_shape(x.value(), weights, "weighted_sum");
    double acc = 0.0;
    for (size_t i = 0; i < weights.data.size(); ++i) acc += x.value().data[i] * weights.data[i];
    Tape& t = *x.tape;
    const int ix = x.id;
    return finish(t, Tensor::scalar(acc), any_grad({x}), [ix, weights = std::move(weights)](int oid) {
        return [ix, weights, oid](Tape& t) {
            if (!wants(t, ix)) return;
            const double g = t.node(oid).grad(0);
            Tensor& dx = t.grad(ix);
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += g * weights.data[i];
        };
    });
}

Var attention_core(Var q, Var k, Var v, int heads) {
    check_same_tape({q, k, v});
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 || qv.dim(1) != kv.dim(1) ||
        kv.dim(0) != vv.dim(0) || kv.dim(1) != vv.dim(1))
        throw std::invalid_argument("attention: Q " + qv.shape_str() + " K " + kv.shape_str() + " V " +
                                    vv.shape_str());
    const int d = qv.dim(1);
    if (heads < 1 || d % heads != 0)
        throw std::invalid_argument("attention: width " + std::to_string(d) + " not divisible by " +
                                    std::to_string(heads) + " heads");
    const int nq = qv.dim(0), nk = kv.dim(0), dh = d / heads;
    if (nq < 1 || nk < 1) throw std::invalid_argument("attention: empty token set");
    Tensor probs = attention_probs(qv, kv, heads); // [heads*nq, nk]
    Tensor y({nq, d});
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < nq; ++i)
            for (int td = 0; td < dh; ++td) {
                double s = 0.0;
                for (int j = 0; j < nk; ++j) s += probs(h * nq + i, j) * vv(j, off + td);
                y(i, off + td) = s;
            }
    }
    Tape& t = *q.tape;
    const int iq = q.id, ik = k.id, iv = v.id;
    return finish(t, std::move(y), any_grad({q, k, v}),
                  [iq, ik, iv, heads, nq, nk, dh, probs = std::move(probs)](int oid) {
        return [iq, ik, iv, heads, nq, nk, dh, probs, oid](Tape& t) {
            const Tensor& dy = t.node(oid).grad;
            const Tensor& qv = t.node(iq).value;
            const Tensor& kv = t.node(ik).value;
            const Tensor& vv = t.node(iv).value;
            const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
            const bool gq = wants(t, iq), gk = wants(t, ik), gv = wants(t, iv);
            Tensor dlogits({nq, nk});
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                if (gv) {
                    Tensor& dvv = t.grad(iv);
                    for (int j = 0; j < nk; ++j)
                        for (int td = 0; td < dh; ++td) {
                            double s = 0.0;
                            for (int i = 0; i < nq; ++i) s += probs(h * nq + i, j) * dy(i, off + td);
                            dvv(j, off + td) += s;
                        }
                }
                if (!gq && !gk) continue;
                // dP then softmax-row backward into dlogits
                for (int i = 0; i < nq; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < nk; ++j) {
                        double dp = 0.0;
                        for (int td = 0; td < dh; ++td) dp += dy(i, off + td) * vv(j, off + td);
                        dlogits(i, j) = dp;
                        dot += dp * probs(h * nq + i, j);
                    }
                    for (int j = 0; j < nk; ++j)
                        dlogits(i, j) = probs(h * nq + i, j) * (dlogits(i, j) - dot);
                }
                if (gq) {
                    Tensor& dq = t.grad(iq);
                    for (int i = 0; i < nq; ++i)
                        for (int td = 0; td < dh; ++td) {
                            double s = 0.0;
                            for (int j = 0; j < nk; ++j) s += dlogits(i, j) * kv(j, off + td);
                            dq(i, off + td) += s * sc;
                        }
                }
                if (gk) {
                    Tensor& dk = t.grad(ik);
                    for (int j = 0; j < nk; ++j)
                        for (int td = 0; td < dh; ++td) {
                            double s = 0.0;
                            for (int i = 0; i < nq; ++i) s += dlogits(i, j) * qv(i, off + td);
                            dk(j, off + td) += s * sc;
                        }
                }
            }
        };
    });
}

Var multi_head_attention(Tape& t, const MhaParams& p, Var q, Var k, Var v, int heads) {
    Var wq = t.param(*p.wq), bq = t.param(*p.bq);
    Var wk = t.param(*p.wk), bk = t.param(*p.bk);
    Var wv = t.param(*p.wv), bv = t.param(*p.bv);
    return attention_core(linear(wq, bq, q), linear(wk, bk, k), linear(wv, bv, v), heads);
}

} // namespace sbd
