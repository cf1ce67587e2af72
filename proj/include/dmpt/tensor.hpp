#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dmpt {

// One value node in the autodiff graph. Row-major flat float32 storage.
// `inputs` + `backward_fn` form the lineage; both stay empty for leaves and
// for results that no gradient flows through.
struct TensorNode {
    std::vector<int> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;  // empty until the first accumulation
    const char* op = nullptr;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void(TensorNode&)> backward_fn;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
};

// Value-semantics handle over a shared graph node. A default-constructed
// Tensor is "undefined" and used to mean "absent".
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int> shape, std::vector<float> data, bool requires_grad = false);

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const;
    int dim(int axis) const;
    std::int64_t numel() const;
    int rows() const;  // rank-2 only
    int cols() const;  // rank-2 only

    float* data();
    const float* data() const;
    std::vector<float>& values();
    const std::vector<float>& values() const;
    float item() const;  // numel()==1 only

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::vector<float>& grad();
    const std::vector<float>& grad() const;
    void zero_grad();

    bool has_lineage() const;
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<TensorNode>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

std::string shape_str(const std::vector<int>& shape);

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
// into every ancestor that requires them.
void backward(const Tensor& loss);

// While alive, newly created ops record no lineage and require no grad.
// Forward values are unchanged. Used by evaluation-only code paths.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& matrix, const Tensor& bias);  // bias broadcast over rows
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor softmax(const Tensor& x, float temperature = 1.0f);  // last axis
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float epsilon);
Tensor gelu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& x);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor reshape(const Tensor& x, std::vector<int> shape);

inline Tensor concat_rows(std::initializer_list<Tensor> parts) {
    return concat_rows(std::span<const Tensor>(parts.begin(), parts.size()));
}

}  // namespace dmpt
