#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "sbd/tensor.hpp"

namespace sbd {

/// Trainable value: tensor plus a gradient buffer of identical shape.
/// A non-trainable parameter never receives gradient; its buffer stays zero.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor gradient;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), gradient(value.shape, 0.0), trainable(train) {}

    void zero_grad() { std::fill(gradient.data.begin(), gradient.data.end(), 0.0); }
};

/// Owns parameters with stable addresses and unique names, in registration order.
class ParamStore {
public:
    Parameter& add(std::string name, Tensor init, bool trainable = true);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    size_t size() const { return storage_.size(); }
    void zero_grads();

private:
    std::deque<Parameter> storage_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is cleared.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    const std::vector<int>& shape() const;
    int64_t numel() const { return value().numel(); }
};

/// Reverse-mode accumulation tape. Records one forward pass; backward() walks
/// nodes in reverse creation order (a valid topological order by construction)
/// and accumulates gradients into bound Parameters. One backward per tape.
/// Each thread must own its tape; nodes whose ancestors are all constants or
/// frozen parameters carry no backward closure and are skipped entirely.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backprop;
        Parameter* bound = nullptr;
    };

    Var constant(Tensor v);
    Var param(Parameter& p);
    Var make(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop);

    /// Seeds d(root)/d(root)=1 and propagates; root must be a scalar.
    void backward(Var root);

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    /// Gradient buffer for a node, allocated on first use.
    Tensor& grad(int id);
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::deque<Node> nodes_;
    bool used_ = false;
};

// ---- differentiable operations ----

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);               // elementwise, same shape
Var divide(Var a, Var b);            // elementwise, same shape
Var neg(Var a);
Var scale(Var a, double c);
Var scale_by(Var a, Var s);          // s is a scalar [1]
Var elem(Var a, int64_t flat_index); // -> [1]
Var concat(const std::vector<Var>& parts); // 1-D concat
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::vector<int> shape);
Var linear(Var w, Var b, Var x);     // x: [in] -> [out], or [N,in] -> [N,out]
Var conv3x3(Var w, Var b, Var x);
Var conv1x1(Var w, Var b, Var x);
Var relu(Var x);
Var sigmoid(Var x);
Var absval(Var x);
Var softmax(Var x);                  // 1-D, stabilized
Var gap(Var x);                      // [C,H,W] -> [C]
Var avgpool2(Var x);
Var maxpool2(Var x);
Var sum(Var x);                      // -> [1]
Var mean(Var x);                     // -> [1]
Var repeat_row(Var v, int n);        // [D] -> [N,D]
Var gather_rows(Var x, std::vector<int> ids);
Var slice_row(Var x, int row);       // [N,D] -> [D]
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);
Var mul_channelwise(Var x, Var s);   // [C,H,W] * [C]
Var mul_spatial(Var x, Var m);       // [C,H,W] * [H,W]
Var spatial_stats(Var x);            // [C,H,W] -> [2,H,W] (channel mean, channel max)
/// Per-row losses: logsumexp(row) - row[target], stable. -> [N]
Var cross_entropy_rows(Var logits, std::vector<int> targets);
/// Mean of elementwise binary cross-entropy with logits against constant targets in {0,1}.
Var bce_with_logits_mean(Var logits, Tensor targets);
Var weighted_sum(Var x, Tensor weights); // -> [1]

/// Per-head scaled dot-product attention Softmax(Q_h K_h^T / sqrt(d_h)) V_h,
/// heads concatenated; no output projection. Q [Nq,D], K,V [Nk,D] -> [Nq,D].
Var attention_core(Var q, Var k, Var v, int heads);

/// Learned-projection multi-head attention over token rows (the Eq.-7-style
/// block): projects q/k/v with the given weights, then attention_core.
struct MhaParams {
    Parameter* wq = nullptr;
    Parameter* bq = nullptr;
    Parameter* wk = nullptr;
    Parameter* bk = nullptr;
    Parameter* wv = nullptr;
    Parameter* bv = nullptr;
};
Var multi_head_attention(Tape& t, const MhaParams& p, Var q, Var k, Var v, int heads);

} // namespace sbd
