#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sinklab/error.hpp"
#include "sinklab/rng.hpp"

namespace sinklab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,          // x * c
    add_scalar,     // x + c
    scale_by,       // x * s, s a one-element tensor
    matmul,         // [m×k]·[k×n]
    matmul_bt,      // [m×k]·[n×k]ᵀ
    unary,
    softmax_rows,
    reduce,
    embed_rows,
    slice_cols,
    concat_cols,
    broadcast_row,  // [n] -> [rows×n]
    broadcast_col,  // [m] -> [m×cols]
    repeat_cols,    // [m×g] -> [m×g·group], column j copies source j/group
    rope,
    masked_nll,
};

enum class UnaryKind : std::uint8_t { silu, gelu, tanh, sigmoid, sqrt, recip };
enum class ReduceKind : std::uint8_t { sum, mean };

// One tape entry. The tape is the implicit DAG of TensorNodes ordered by
// creation id; backward walks reachable nodes once, in descending id order,
// so gradient accumulation order is fixed.
struct TensorNode {
    Op op = Op::leaf;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily; persists on leaves
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::vector<double> saved;         // forward quantities kept for backward
    std::vector<std::size_t> indices;  // integer operands (ids, axes, offsets)
    std::uint8_t tag = 0;              // op subkind (UnaryKind / ReduceKind / flags)

    std::size_t numel() const { return value.size(); }
};

// Value-semantics handle over a tape node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    bool requires_grad() const { return node_->requires_grad; }

    // Rvalue handles hand out a copy so `for (v : op(...).values())` cannot
    // iterate a buffer the temporary just freed.
    const std::vector<double>& values() const& { return node_->value; }
    std::vector<double> values() const&& { return node_->value; }
    // Leaf-only in-place mutation (optimizer updates, test setup).
    std::vector<double>& mutable_values();

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const&;
    std::vector<double> grad() const&& { return grad_ref(); }
    void zero_grad() const;

    double item() const;
    double at(std::size_t i) const { return node_->value[i]; }
    double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    const std::vector<double>& grad_ref() const;
    friend Tensor make_node(Op op, Shape shape, std::vector<Tensor> inputs, std::uint8_t tag);
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;
};

// --- elementwise and structural ops -----------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor scale_by(const Tensor& x, const Tensor& s);  // s has one element

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_bt(const Tensor& a, const Tensor& b);

Tensor unary(const Tensor& x, UnaryKind kind);

// Row-wise softmax; mask entries are 0 (keep) or -inf (drop) and do not
// receive gradient. A fully masked row is a degenerate-row error.
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows(const Tensor& x, const Tensor& mask);

Tensor reduce(const Tensor& x, ReduceKind kind);                    // full -> shape {1}
Tensor reduce(const Tensor& x, ReduceKind kind, std::size_t axis);  // rank-2 only

Tensor embed_rows(const Tensor& table, const std::vector<std::uint32_t>& ids);
Tensor slice_cols(const Tensor& x, std::size_t col0, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor broadcast_row(const Tensor& v, std::size_t rows);
Tensor broadcast_col(const Tensor& v, std::size_t cols);
Tensor repeat_cols(const Tensor& x, std::size_t group);

// Rotary embedding over coordinate pairs (2j, 2j+1); row p rotated by
// p·base^(-2j/d) where d = cols (must be even).
Tensor rope_rotate(const Tensor& x, double base);

// Mean NLL over rows pos_min..pos_max (1-based, inclusive) of
// -log softmax(logits_row)[target]. Other rows contribute nothing.
Tensor masked_nll(const Tensor& logits, const std::vector<std::uint32_t>& targets,
                  std::size_t pos_min, std::size_t pos_max);

// --- autodiff ----------------------------------------------------------------

// Reverse accumulation from a one-element loss into every reachable leaf
// with requires_grad. Repeated calls accumulate additively.
void backward(const Tensor& loss);

bool all_finite(const Tensor& t);

// Max over coordinates of |analytic - central difference| /
// (|analytic| + |central| + 1e-12), with f rebuilt per evaluation. f must be
// deterministic; a stochastic f silently produces a meaningless result.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                         double step);

// --- raw kernels (value-level, no tape) --------------------------------------
// C += A·B, C += A·Bᵀ, C += Aᵀ·B over row-major buffers.
namespace kernels {
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);
}  // namespace kernels

}  // namespace sinklab
