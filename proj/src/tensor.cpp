#include "sbd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sbd {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
    for (int e : shape)
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_to_string(shape));
    data.assign(static_cast<size_t>(shape_numel(shape)), fill);
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> d) {
    Tensor t;
    t.shape = std::move(s);
    if (shape_numel(t.shape) != static_cast<int64_t>(d.size()))
        throw std::invalid_argument("tensor data length " + std::to_string(d.size()) +
                                    " does not match shape " + shape_to_string(t.shape));
    t.data = std::move(d);
    return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::require_finite(const char* where) const {
    if (!all_finite()) throw std::runtime_error(std::string("non-finite value in ") + where);
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

Tensor softmax_vec(const Tensor& v) {
    if (v.numel() == 0 || v.shape.empty()) throw std::invalid_argument("empty softmax axis");
    Tensor y = v;
    double mx = v.data[0];
    for (double x : v.data) mx = std::max(mx, x);
    double sum = 0.0;
    for (size_t i = 0; i < v.data.size(); ++i) {
        y.data[i] = std::exp(v.data[i] - mx);
        sum += y.data[i];
    }
    for (double& x : y.data) x /= sum;
    return y;
}

Tensor softmax_rows(const Tensor& m) {
    if (m.rank() != 2) throw std::invalid_argument("softmax_rows expects rank-2 input, got " + m.shape_str());
    if (m.dim(1) == 0) throw std::invalid_argument("empty softmax axis");
    Tensor y = m;
    const int n = m.dim(0), d = m.dim(1);
    for (int i = 0; i < n; ++i) {
        double* row = &y.data[static_cast<size_t>(i) * d];
        double mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < d; ++j) row[j] /= sum;
    }
    return y;
}

Tensor gap_chw(const Tensor& x) {
    if (x.rank() != 3) throw std::invalid_argument("gap expects [C,H,W], got " + x.shape_str());
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({c});
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        const double* p = &x.data[static_cast<size_t>(ch) * h * w];
        for (int i = 0; i < h * w; ++i) s += p[i];
        y(ch) = s * inv;
    }
    return y;
}

Tensor linear_vec(const Tensor& w, const Tensor& b, const Tensor& x) {
    if (w.rank() != 2 || x.rank() != 1 || b.rank() != 1 || w.dim(1) != x.dim(0) || w.dim(0) != b.dim(0))
        throw std::invalid_argument("linear: weight " + w.shape_str() + " incompatible with input " +
                                    x.shape_str() + " and bias " + b.shape_str());
    const int out = w.dim(0), in = w.dim(1);
    Tensor y({out});
    for (int o = 0; o < out; ++o) {
        double s = b(o);
        const double* wr = &w.data[static_cast<size_t>(o) * in];
        for (int i = 0; i < in; ++i) s += wr[i] * x(i);
        y(o) = s;
    }
    return y;
}

Tensor conv3x3(const Tensor& w, const Tensor& b, const Tensor& x) {
    if (w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
        throw std::invalid_argument("conv3x3: weight must be [Co,Ci,3,3], got " + w.shape_str());
    if (x.rank() != 3 || x.dim(0) != w.dim(1))
        throw std::invalid_argument("conv3x3: weight " + w.shape_str() + " incompatible with input " + x.shape_str());
    const int co = w.dim(0), ci = w.dim(1), h = x.dim(1), wd = x.dim(2);
    Tensor y({co, h, wd});
    for (int oc = 0; oc < co; ++oc) {
        double* out = &y.data[static_cast<size_t>(oc) * h * wd];
        for (int i = 0; i < h * wd; ++i) out[i] = b(oc);
        for (int ic = 0; ic < ci; ++ic) {
            const double* in = &x.data[static_cast<size_t>(ic) * h * wd];
            const double* k = &w.data[(static_cast<size_t>(oc) * ci + ic) * 9];
            for (int du = -1; du <= 1; ++du) {
                for (int dv = -1; dv <= 1; ++dv) {
                    const double kv = k[(du + 1) * 3 + (dv + 1)];
                    if (kv == 0.0) continue;
                    const int r0 = std::max(0, -du), r1 = std::min(h, h - du);
                    const int c0 = std::max(0, -dv), c1 = std::min(wd, wd - dv);
                    for (int r = r0; r < r1; ++r) {
                        double* orow = out + static_cast<size_t>(r) * wd;
                        const double* irow = in + static_cast<size_t>(r + du) * wd + dv;
                        for (int c = c0; c < c1; ++c) orow[c] += kv * irow[c];
                    }
                }
            }
        }
    }
    return y;
}

Tensor conv1x1(const Tensor& w, const Tensor& b, const Tensor& x) {
    if (w.rank() != 2 || x.rank() != 3 || x.dim(0) != w.dim(1))
        throw std::invalid_argument("conv1x1: weight " + w.shape_str() + " incompatible with input " + x.shape_str());
    const int co = w.dim(0), ci = w.dim(1), hw = x.dim(1) * x.dim(2);
    Tensor y({co, x.dim(1), x.dim(2)});
    for (int oc = 0; oc < co; ++oc) {
        double* out = &y.data[static_cast<size_t>(oc) * hw];
        for (int i = 0; i < hw; ++i) out[i] = b(oc);
        for (int ic = 0; ic < ci; ++ic) {
            const double kv = w(oc, ic);
            const double* in = &x.data[static_cast<size_t>(ic) * hw];
            for (int i = 0; i < hw; ++i) out[i] += kv * in[i];
        }
    }
    return y;
}

Tensor avgpool2(const Tensor& x) {
    if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2)
        throw std::invalid_argument("avgpool2 expects [C,H,W] with even H,W, got " + x.shape_str());
    const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
    Tensor y({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                y(ch, i, j) = 0.25 * (x(ch, 2 * i, 2 * j) + x(ch, 2 * i, 2 * j + 1) +
                                       x(ch, 2 * i + 1, 2 * j) + x(ch, 2 * i + 1, 2 * j + 1));
    return y;
}

Tensor maxpool2(const Tensor& x) {
    if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2)
        throw std::invalid_argument("maxpool2 expects [C,H,W] with even H,W, got " + x.shape_str());
    const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
    Tensor y({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                y(ch, i, j) = std::max(std::max(x(ch, 2 * i, 2 * j), x(ch, 2 * i, 2 * j + 1)),
                                       std::max(x(ch, 2 * i + 1, 2 * j), x(ch, 2 * i + 1, 2 * j + 1)));
    return y;
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: " + a.shape_str() + " x " + b.shape_str());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0) ? b.dim(1) : 0;
    Tensor c({m, n});
    for (int i = 0; i < m; ++i) {
        double* crow = &c.data[static_cast<size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
            const double av = a(i, p);
            if (av == 0.0) continue;
            const double* brow = &b.data[static_cast<size_t>(p) * n];
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Tensor attention_probs(const Tensor& q, const Tensor& k, int heads) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1))
        throw std::invalid_argument("attention: Q " + q.shape_str() + " vs K " + k.shape_str());
    const int d = q.dim(1);
    if (heads < 1 || d % heads != 0)
        throw std::invalid_argument("attention: width " + std::to_string(d) + " not divisible by " +
                                    std::to_string(heads) + " heads");
    const int nq = q.dim(0), nk = k.dim(0), dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor logits({heads * nq, nk});
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < nq; ++i)
            for (int j = 0; j < nk; ++j) {
                double s = 0.0;
                for (int t = 0; t < dh; ++t) s += q(i, off + t) * k(j, off + t);
                logits(h * nq + i, j) = s * scale;
            }
    }
    return softmax_rows(logits);
}

} // namespace sbd
