#include "dmpt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dmpt/errors.hpp"

namespace dmpt {

namespace {

thread_local bool g_grad_enabled = true;

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

void check_positive_extents(const std::vector<int>& shape) {
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
}

bool any_requires(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->defined() && t->node()->requires_grad) return true;
    }
    return false;
}

// Allocates the output node; wires lineage only when gradients can flow.
Tensor make_result(std::vector<int> shape, std::vector<float> data, const char* op,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (g_grad_enabled && any_requires(inputs)) {
        node->requires_grad = true;
        node->op = op;
        node->inputs.reserve(inputs.size());
        for (const Tensor* t : inputs) node->inputs.push_back(t->node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void ensure_grad(TensorNode& node) {
    if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0f);
}

// Accumulate `delta` into the input's grad buffer if it needs one.
void accum(const std::shared_ptr<TensorNode>& node, const float* delta, std::size_t n) {
    if (!node->requires_grad) return;
    ensure_grad(*node);
    for (std::size_t i = 0; i < n; ++i) node->grad[i] += delta[i];
}

// C(m x n) += A(m x k) * B(k x n)
void mm_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        float* crow = c + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m x q) += A(m x p) * B(q x p)^T
void mm_acc_nt(const float* a, const float* b, float* c, int m, int p, int q) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * p;
        float* crow = c + static_cast<std::size_t>(i) * q;
        for (int j = 0; j < q; ++j) {
            const float* brow = b + static_cast<std::size_t>(j) * p;
            float acc = 0.0f;
            for (int kk = 0; kk < p; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C(k x n) += A(m x k)^T * B(m x n)
void mm_acc_tn(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        const float* brow = b + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            float* crow = c + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor argument");
}

void require_rank(const Tensor& t, int rank, const char* op) {
    require_defined(t, op);
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(t.shape()));
    }
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    out += "]";
    return out;
}

// ---- Tensor handle --------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    check_positive_extents(shape);
    if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    check_positive_extents(shape);
    std::vector<float> data(static_cast<std::size_t>(numel_of(shape)), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
int Tensor::dim(int axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
std::int64_t Tensor::numel() const { return node_->numel(); }

int Tensor::rows() const {
    if (rank() != 2) throw ShapeError("rows(): tensor is not rank-2: " + shape_str(shape()));
    return node_->shape[0];
}

int Tensor::cols() const {
    if (rank() != 2) throw ShapeError("cols(): tensor is not rank-2: " + shape_str(shape()));
    return node_->shape[1];
}

float* Tensor::data() { return node_->data.data(); }
const float* Tensor::data() const { return node_->data.data(); }
std::vector<float>& Tensor::values() { return node_->data; }
const std::vector<float>& Tensor::values() const { return node_->data; }

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    require_defined(*this, "set_requires_grad");
    if (flag && node_->backward_fn) {
        throw ContractError("set_requires_grad: only leaf tensors may be toggled");
    }
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<float>& Tensor::grad() {
    if (!has_grad()) throw ContractError("grad(): tensor has no gradient buffer");
    return node_->grad;
}

const std::vector<float>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("grad(): tensor has no gradient buffer");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

bool Tensor::has_lineage() const { return node_ && static_cast<bool>(node_->backward_fn); }

// ---- backward sweep -------------------------------------------------------

void backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.has_lineage()) {
        throw ContractError("backward: loss has no lineage to traverse");
    }

    // Post-order DFS; the reversed order visits each node before its inputs.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorNode* child = node->inputs[next++].get();
            if (child->backward_fn && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad(*loss.node());
    loss.node()->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        ensure_grad(*node);
        node->backward_fn(*node);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<float> out(static_cast<std::size_t>(m) * n, 0.0f);
    mm_acc(a.data(), b.data(), out.data(), m, k, n);
    return make_result({m, n}, std::move(out), "matmul", {&a, &b}, [m, k, n](TensorNode& self) {
        const auto& lhs = self.inputs[0];
        const auto& rhs = self.inputs[1];
        if (lhs->requires_grad) {
            ensure_grad(*lhs);
            mm_acc_nt(self.grad.data(), rhs->data.data(), lhs->grad.data(), m, n, k);
        }
        if (rhs->requires_grad) {
            ensure_grad(*rhs);
            mm_acc_tn(lhs->data.data(), self.grad.data(), rhs->grad.data(), m, k, n);
        }
    });
}

Tensor transpose(const Tensor& x) {
    require_rank(x, 2, "transpose");
    const int m = x.rows(), n = x.cols();
    std::vector<float> out(static_cast<std::size_t>(m) * n);
    const float* src = x.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = src[static_cast<std::size_t>(i) * n + j];
    return make_result({n, m}, std::move(out), "transpose", {&x}, [m, n](TensorNode& self) {
        const auto& input = self.inputs[0];
        if (!input->requires_grad) return;
        ensure_grad(*input);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                input->grad[static_cast<std::size_t>(i) * n + j] += self.grad[static_cast<std::size_t>(j) * m + i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_defined(a, "add");
    require_defined(b, "add");
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.values().size();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result(a.shape(), std::move(out), "add", {&a, &b}, [n](TensorNode& self) {
        accum(self.inputs[0], self.grad.data(), n);
        accum(self.inputs[1], self.grad.data(), n);
    });
}

Tensor add_bias(const Tensor& matrix, const Tensor& bias) {
    require_rank(matrix, 2, "add_bias");
    require_rank(bias, 1, "add_bias");
    const int rows = matrix.rows(), cols = matrix.cols();
    if (bias.dim(0) != cols) {
        throw ShapeError("add_bias: bias length disagrees: " + shape_str(matrix.shape()) + " vs " +
                         shape_str(bias.shape()));
    }
    std::vector<float> out(static_cast<std::size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out[static_cast<std::size_t>(i) * cols + j] = matrix.data()[static_cast<std::size_t>(i) * cols + j] + bias.data()[j];
    return make_result(matrix.shape(), std::move(out), "add_bias", {&matrix, &bias},
                       [rows, cols](TensorNode& self) {
                           accum(self.inputs[0], self.grad.data(), self.grad.size());
                           const auto& b = self.inputs[1];
                           if (!b->requires_grad) return;
                           ensure_grad(*b);
                           for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < cols; ++j)
                                   b->grad[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i) * cols + j];
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_defined(a, "mul");
    require_defined(b, "mul");
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.values().size();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result(a.shape(), std::move(out), "mul", {&a, &b}, [n](TensorNode& self) {
        const auto& lhs = self.inputs[0];
        const auto& rhs = self.inputs[1];
        if (lhs->requires_grad) {
            ensure_grad(*lhs);
            for (std::size_t i = 0; i < n; ++i) lhs->grad[i] += self.grad[i] * rhs->data[i];
        }
        if (rhs->requires_grad) {
            ensure_grad(*rhs);
            for (std::size_t i = 0; i < n; ++i) rhs->grad[i] += self.grad[i] * lhs->data[i];
        }
    });
}

Tensor scale(const Tensor& x, float factor) {
    require_defined(x, "scale");
    const std::size_t n = x.values().size();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i] * factor;
    return make_result(x.shape(), std::move(out), "scale", {&x}, [n, factor](TensorNode& self) {
        const auto& input = self.inputs[0];
        if (!input->requires_grad) return;
        ensure_grad(*input);
        for (std::size_t i = 0; i < n; ++i) input->grad[i] += self.grad[i] * factor;
    });
}

Tensor softmax(const Tensor& x, float temperature) {
    require_defined(x, "softmax");
    if (!(temperature > 0.0f)) {
        throw ValueError("softmax: temperature must be positive, got " + std::to_string(temperature));
    }
    if (x.rank() < 1) throw ShapeError("softmax: scalar input has no axis: " + shape_str(x.shape()));
    const int width = x.shape().back();
    const std::size_t slices = x.values().size() / static_cast<std::size_t>(width);
    std::vector<float> out(x.values().size());
    for (std::size_t s = 0; s < slices; ++s) {
        const float* in_row = x.data() + s * width;
        float* out_row = out.data() + s * width;
        float max_v = in_row[0];
        for (int j = 1; j < width; ++j) max_v = std::max(max_v, in_row[j]);
        double total = 0.0;
        for (int j = 0; j < width; ++j) {
            const double e = std::exp(static_cast<double>(in_row[j] - max_v) / temperature);
            out_row[j] = static_cast<float>(e);
            total += e;
        }
        const float inv = static_cast<float>(1.0 / total);
        for (int j = 0; j < width; ++j) out_row[j] *= inv;
    }
    return make_result(x.shape(), std::move(out), "softmax", {&x},
                       [width, slices, temperature](TensorNode& self) {
                           const auto& input = self.inputs[0];
                           if (!input->requires_grad) return;
                           ensure_grad(*input);
                           for (std::size_t s = 0; s < slices; ++s) {
                               const float* y = self.data.data() + s * width;
                               const float* gy = self.grad.data() + s * width;
                               float* gx = input->grad.data() + s * width;
                               double dot = 0.0;
                               for (int j = 0; j < width; ++j) dot += static_cast<double>(gy[j]) * y[j];
                               for (int j = 0; j < width; ++j)
                                   gx[j] += y[j] * (gy[j] - static_cast<float>(dot)) / temperature;
                           }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float epsilon) {
    require_defined(x, "layer_norm");
    require_rank(gain, 1, "layer_norm");
    require_rank(bias, 1, "layer_norm");
    if (x.rank() < 1) throw ShapeError("layer_norm: scalar input has no axis");
    const int width = x.shape().back();
    if (gain.dim(0) != width || bias.dim(0) != width) {
        throw ShapeError("layer_norm: last axis " + shape_str(x.shape()) + " disagrees with gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
    }
    const std::size_t slices = x.values().size() / static_cast<std::size_t>(width);
    std::vector<float> out(x.values().size());
    for (std::size_t s = 0; s < slices; ++s) {
        const float* row = x.data() + s * width;
        float* out_row = out.data() + s * width;
        double mean = 0.0;
        for (int j = 0; j < width; ++j) mean += row[j];
        mean /= width;
        double var = 0.0;
        for (int j = 0; j < width; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= width;
        const double inv_std = 1.0 / std::sqrt(var + epsilon);
        for (int j = 0; j < width; ++j) {
            const float normed = static_cast<float>((row[j] - mean) * inv_std);
            out_row[j] = normed * gain.data()[j] + bias.data()[j];
        }
    }
    return make_result(x.shape(), std::move(out), "layer_norm", {&x, &gain, &bias},
                       [width, slices, epsilon](TensorNode& self) {
                           const auto& xin = self.inputs[0];
                           const auto& g = self.inputs[1];
                           const auto& b = self.inputs[2];
                           if (xin->requires_grad) ensure_grad(*xin);
                           if (g->requires_grad) ensure_grad(*g);
                           if (b->requires_grad) ensure_grad(*b);
                           std::vector<float> normed(static_cast<std::size_t>(width));
                           for (std::size_t s = 0; s < slices; ++s) {
                               const float* row = xin->data.data() + s * width;
                               const float* gy = self.grad.data() + s * width;
                               double mean = 0.0;
                               for (int j = 0; j < width; ++j) mean += row[j];
                               mean /= width;
                               double var = 0.0;
                               for (int j = 0; j < width; ++j) {
                                   const double d = row[j] - mean;
                                   var += d * d;
                               }
                               var /= width;
                               const double inv_std = 1.0 / std::sqrt(var + epsilon);
                               for (int j = 0; j < width; ++j)
                                   normed[static_cast<std::size_t>(j)] =
                                       static_cast<float>((row[j] - mean) * inv_std);
                               if (g->requires_grad || b->requires_grad) {
                                   for (int j = 0; j < width; ++j) {
                                       if (g->requires_grad) g->grad[static_cast<std::size_t>(j)] += gy[j] * normed[static_cast<std::size_t>(j)];
                                       if (b->requires_grad) b->grad[static_cast<std::size_t>(j)] += gy[j];
                                   }
                               }
                               if (xin->requires_grad) {
                                   // d/dx of affine(normalize(x)): project out mean and
                                   // normalized-direction components.
                                   double sum_gd = 0.0, sum_gdn = 0.0;
                                   for (int j = 0; j < width; ++j) {
                                       const double gd = static_cast<double>(gy[j]) * g->data[static_cast<std::size_t>(j)];
                                       sum_gd += gd;
                                       sum_gdn += gd * normed[static_cast<std::size_t>(j)];
                                   }
                                   const double mean_gd = sum_gd / width;
                                   const double mean_gdn = sum_gdn / width;
                                   float* gx = xin->grad.data() + s * width;
                                   for (int j = 0; j < width; ++j) {
                                       const double gd = static_cast<double>(gy[j]) * g->data[static_cast<std::size_t>(j)];
                                       gx[j] += static_cast<float>((gd - mean_gd - normed[static_cast<std::size_t>(j)] * mean_gdn) * inv_std);
                                   }
                               }
                           }
                       });
}

Tensor gelu(const Tensor& x) {
    require_defined(x, "gelu");
    const std::size_t n = x.values().size();
    std::vector<float> out(n);
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    return make_result(x.shape(), std::move(out), "gelu", {&x}, [n](TensorNode& self) {
        const auto& input = self.inputs[0];
        if (!input->requires_grad) return;
        ensure_grad(*input);
        constexpr double kInvSqrt2 = 0.70710678118654752440;
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = input->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            input->grad[i] += self.grad[i] * static_cast<float>(cdf + v * pdf);
        }
    });
}

Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    double total = 0.0;
    for (float v : x.values()) total += v;
    return make_result({}, {static_cast<float>(total)}, "sum", {&x}, [](TensorNode& self) {
        const auto& input = self.inputs[0];
        if (!input->requires_grad) return;
        ensure_grad(*input);
        const float g = self.grad[0];
        for (float& gv : input->grad) gv += g;
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    require_rank(logits, 2, "cross_entropy");
    const int batch = logits.rows(), classes = logits.cols();
    if (static_cast<int>(targets.size()) != batch) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for batch " +
                         std::to_string(batch));
    }
    for (int t : targets) {
        if (t < 0 || t >= classes) {
            throw ValueError("cross_entropy: label " + std::to_string(t) + " out of range [0," +
                             std::to_string(classes) + ")");
        }
    }
    std::vector<float> probs(logits.values().size());
    double loss = 0.0;
    for (int i = 0; i < batch; ++i) {
        const float* row = logits.data() + static_cast<std::size_t>(i) * classes;
        float* prow = probs.data() + static_cast<std::size_t>(i) * classes;
        float max_v = row[0];
        for (int j = 1; j < classes; ++j) max_v = std::max(max_v, row[j]);
        double total = 0.0;
        for (int j = 0; j < classes; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - max_v));
            prow[j] = static_cast<float>(e);
            total += e;
        }
        const double log_norm = std::log(total) + max_v;
        loss += log_norm - row[targets[static_cast<std::size_t>(i)]];
        const float inv = static_cast<float>(1.0 / total);
        for (int j = 0; j < classes; ++j) prow[j] *= inv;
    }
    loss /= batch;
    return make_result({}, {static_cast<float>(loss)}, "cross_entropy", {&logits},
                       [batch, classes, targets, probs = std::move(probs)](TensorNode& self) {
                           const auto& input = self.inputs[0];
                           if (!input->requires_grad) return;
                           ensure_grad(*input);
                           const float g = self.grad[0] / static_cast<float>(batch);
                           for (int i = 0; i < batch; ++i) {
                               const float* prow = probs.data() + static_cast<std::size_t>(i) * classes;
                               float* grow = input->grad.data() + static_cast<std::size_t>(i) * classes;
                               for (int j = 0; j < classes; ++j) grow[j] += g * prow[j];
                               grow[targets[static_cast<std::size_t>(i)]] -= g;
                           }
                       });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    require_rank(a, 1, "cosine_similarity");
    require_rank(b, 1, "cosine_similarity");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("cosine_similarity: lengths disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const int n = a.dim(0);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < n; ++i) {
        dot += static_cast<double>(a.data()[i]) * b.data()[i];
        na += static_cast<double>(a.data()[i]) * a.data()[i];
        nb += static_cast<double>(b.data()[i]) * b.data()[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw ValueError("cosine_similarity: zero-norm input vector");
    }
    const double norm_a = std::sqrt(na), norm_b = std::sqrt(nb);
    const double sim = dot / (norm_a * norm_b);
    return make_result({}, {static_cast<float>(sim)}, "cosine_similarity", {&a, &b},
                       [n, norm_a, norm_b, sim](TensorNode& self) {
                           const auto& lhs = self.inputs[0];
                           const auto& rhs = self.inputs[1];
                           const double g = self.grad[0];
                           if (lhs->requires_grad) {
                               ensure_grad(*lhs);
                               for (int i = 0; i < n; ++i)
                                   lhs->grad[static_cast<std::size_t>(i)] += static_cast<float>(
                                       g * (rhs->data[static_cast<std::size_t>(i)] / (norm_a * norm_b) -
                                            sim * lhs->data[static_cast<std::size_t>(i)] / (norm_a * norm_a)));
                           }
                           if (rhs->requires_grad) {
                               ensure_grad(*rhs);
                               for (int i = 0; i < n; ++i)
                                   rhs->grad[static_cast<std::size_t>(i)] += static_cast<float>(
                                       g * (lhs->data[static_cast<std::size_t>(i)] / (norm_a * norm_b) -
                                            sim * rhs->data[static_cast<std::size_t>(i)] / (norm_b * norm_b)));
                           }
                       });
}

Tensor l2_normalize(const Tensor& x) {
    require_rank(x, 1, "l2_normalize");
    const int n = x.dim(0);
    double sq = 0.0;
    for (int i = 0; i < n; ++i) sq += static_cast<double>(x.data()[i]) * x.data()[i];
    if (sq == 0.0) throw ValueError("l2_normalize: zero-norm input vector");
    const double norm = std::sqrt(sq);
    std::vector<float> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(x.data()[i] / norm);
    return make_result(x.shape(), std::move(out), "l2_normalize", {&x}, [n, norm](TensorNode& self) {
        const auto& input = self.inputs[0];
        if (!input->requires_grad) return;
        ensure_grad(*input);
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += static_cast<double>(self.grad[static_cast<std::size_t>(i)]) * self.data[static_cast<std::size_t>(i)];
        for (int i = 0; i < n; ++i)
            input->grad[static_cast<std::size_t>(i)] += static_cast<float>(
                (self.grad[static_cast<std::size_t>(i)] - dot * self.data[static_cast<std::size_t>(i)]) / norm);
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts given");
    int cols = -1, total_rows = 0;
    for (const Tensor& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (cols < 0) cols = p.cols();
        if (p.cols() != cols) {
            throw ShapeError("concat_rows: column counts disagree: " + std::to_string(cols) + " vs " +
                             shape_str(p.shape()));
        }
        total_rows += p.rows();
    }
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(total_rows) * cols);
    for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

    auto node = std::make_shared<TensorNode>();
    node->shape = {total_rows, cols};
    node->data = std::move(out);
    bool needs = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parts)
            if (p.node()->requires_grad) needs = true;
    }
    if (needs) {
        node->requires_grad = true;
        node->op = "concat_rows";
        for (const Tensor& p : parts) node->inputs.push_back(p.node());
        node->backward_fn = [](TensorNode& self) {
            std::size_t offset = 0;
            for (auto& input : self.inputs) {
                const std::size_t n = input->data.size();
                if (input->requires_grad) {
                    ensure_grad(*input);
                    for (std::size_t i = 0; i < n; ++i) input->grad[i] += self.grad[offset + i];
                }
                offset += n;
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor& x, int start, int count) {
    require_rank(x, 2, "slice_rows");
    if (start < 0 || count < 1 || start + count > x.rows()) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of bounds for " + shape_str(x.shape()));
    }
    const int cols = x.cols();
    std::vector<float> out(x.values().begin() + static_cast<std::ptrdiff_t>(start) * cols,
                           x.values().begin() + static_cast<std::ptrdiff_t>(start + count) * cols);
    return make_result({count, cols}, std::move(out), "slice_rows", {&x},
                       [start, count, cols](TensorNode& self) {
                           const auto& input = self.inputs[0];
                           if (!input->requires_grad) return;
                           ensure_grad(*input);
                           const std::size_t offset = static_cast<std::size_t>(start) * cols;
                           for (std::size_t i = 0; i < static_cast<std::size_t>(count) * cols; ++i)
                               input->grad[offset + i] += self.grad[i];
                       });
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    require_rank(x, 2, "slice_cols");
    if (start < 0 || count < 1 || start + count > x.cols()) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of bounds for " + shape_str(x.shape()));
    }
    const int rows = x.rows(), cols = x.cols();
    std::vector<float> out(static_cast<std::size_t>(rows) * count);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < count; ++j)
            out[static_cast<std::size_t>(i) * count + j] = x.data()[static_cast<std::size_t>(i) * cols + start + j];
    return make_result({rows, count}, std::move(out), "slice_cols", {&x},
                       [start, count, rows, cols](TensorNode& self) {
                           const auto& input = self.inputs[0];
                           if (!input->requires_grad) return;
                           ensure_grad(*input);
                           for (int i = 0; i < rows; ++i)
                               for (int j = 0; j < count; ++j)
                                   input->grad[static_cast<std::size_t>(i) * cols + start + j] +=
                                       self.grad[static_cast<std::size_t>(i) * count + j];
                       });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    require_defined(x, "reshape");
    check_positive_extents(shape);
    if (numel_of(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<float> out = x.values();
    return make_result(std::move(shape), std::move(out), "reshape", {&x}, [](TensorNode& self) {
        accum(self.inputs[0], self.grad.data(), self.grad.size());
    });
}

}  // namespace dmpt
