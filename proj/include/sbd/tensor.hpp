#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sbd {

/// Dense multi-dimensional array of 64-bit reals, row-major.
/// The data length always equals the product of the shape extents.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0);
    static Tensor from(std::vector<int> s, std::vector<double> d);
    static Tensor scalar(double v);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double& operator()(int i) { return data[static_cast<size_t>(i)]; }
    double operator()(int i) const { return data[static_cast<size_t>(i)]; }
    double& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double& operator()(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double operator()(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double& operator()(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    double operator()(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    void require_finite(const char* where) const;
    std::string shape_str() const;
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// ---- pure kernels (shared by the taped ops and plain forward paths) ----

/// Numerically stabilized softmax of a 1-D tensor. Throws on an empty axis.
Tensor softmax_vec(const Tensor& v);
/// Row-wise stabilized softmax of an [N, D] tensor.
Tensor softmax_rows(const Tensor& m);
/// Per-channel spatial mean of a [C, H, W] tensor -> [C].
Tensor gap_chw(const Tensor& x);
/// y = W x + b with W [out, in], b [out], x [in].
Tensor linear_vec(const Tensor& w, const Tensor& b, const Tensor& x);
/// 3x3 convolution with zero padding 1: W [Co, Ci, 3, 3], b [Co], x [Ci, H, W] -> [Co, H, W].
Tensor conv3x3(const Tensor& w, const Tensor& b, const Tensor& x);
/// 1x1 convolution: W [Co, Ci], b [Co], x [Ci, H, W] -> [Co, H, W].
Tensor conv1x1(const Tensor& w, const Tensor& b, const Tensor& x);
/// 2x2 average pooling (H, W must be even).
Tensor avgpool2(const Tensor& x);
/// 2x2 max pooling (H, W must be even).
Tensor maxpool2(const Tensor& x);
Tensor relu(const Tensor& x);

/// Per-head attention probabilities for already-projected Q [Nq,D], K [Nk,D]:
/// rows of Softmax(Q_h K_h^T / sqrt(D/heads)) stacked as [heads*Nq, Nk].
Tensor attention_probs(const Tensor& q, const Tensor& k, int heads);

/// C = A B with A [m,k], B [k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

} // namespace sbd
