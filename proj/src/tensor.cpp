#include "sinklab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <unordered_set>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace sinklab {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// --- kernels ------------------------------------------------------------------

namespace kernels {

namespace {

#if defined(__AVX512F__)
// 4x16 register tile; C += A·B.
void mm_nn_body(const double* __restrict a, const double* __restrict b, double* __restrict c,
                std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t MR = 4, NR = 16;
    std::size_t i0 = 0;
    for (; i0 + MR <= m; i0 += MR) {
        std::size_t j0 = 0;
        for (; j0 + NR <= n; j0 += NR) {
            __m512d c00 = _mm512_setzero_pd(), c01 = _mm512_setzero_pd();
            __m512d c10 = _mm512_setzero_pd(), c11 = _mm512_setzero_pd();
            __m512d c20 = _mm512_setzero_pd(), c21 = _mm512_setzero_pd();
            __m512d c30 = _mm512_setzero_pd(), c31 = _mm512_setzero_pd();
            const double* a0 = a + (i0 + 0) * k;
            const double* a1 = a + (i0 + 1) * k;
            const double* a2 = a + (i0 + 2) * k;
            const double* a3 = a + (i0 + 3) * k;
            const double* bp = b + j0;
            for (std::size_t kk = 0; kk < k; ++kk, bp += n) {
                const __m512d b0 = _mm512_loadu_pd(bp);
                const __m512d b1 = _mm512_loadu_pd(bp + 8);
                __m512d va = _mm512_set1_pd(a0[kk]);
                c00 = _mm512_fmadd_pd(va, b0, c00);
                c01 = _mm512_fmadd_pd(va, b1, c01);
                va = _mm512_set1_pd(a1[kk]);
                c10 = _mm512_fmadd_pd(va, b0, c10);
                c11 = _mm512_fmadd_pd(va, b1, c11);
                va = _mm512_set1_pd(a2[kk]);
                c20 = _mm512_fmadd_pd(va, b0, c20);
                c21 = _mm512_fmadd_pd(va, b1, c21);
                va = _mm512_set1_pd(a3[kk]);
                c30 = _mm512_fmadd_pd(va, b0, c30);
                c31 = _mm512_fmadd_pd(va, b1, c31);
            }
            double* c0 = c + (i0 + 0) * n + j0;
            double* c1 = c + (i0 + 1) * n + j0;
            double* c2 = c + (i0 + 2) * n + j0;
            double* c3 = c + (i0 + 3) * n + j0;
            _mm512_storeu_pd(c0, _mm512_add_pd(_mm512_loadu_pd(c0), c00));
            _mm512_storeu_pd(c0 + 8, _mm512_add_pd(_mm512_loadu_pd(c0 + 8), c01));
            _mm512_storeu_pd(c1, _mm512_add_pd(_mm512_loadu_pd(c1), c10));
            _mm512_storeu_pd(c1 + 8, _mm512_add_pd(_mm512_loadu_pd(c1 + 8), c11));
            _mm512_storeu_pd(c2, _mm512_add_pd(_mm512_loadu_pd(c2), c20));
            _mm512_storeu_pd(c2 + 8, _mm512_add_pd(_mm512_loadu_pd(c2 + 8), c21));
            _mm512_storeu_pd(c3, _mm512_add_pd(_mm512_loadu_pd(c3), c30));
            _mm512_storeu_pd(c3 + 8, _mm512_add_pd(_mm512_loadu_pd(c3 + 8), c31));
        }
        if (j0 < n) {
            for (std::size_t i = i0; i < i0 + MR; ++i) {
                double* crow = c + i * n;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double av = a[i * k + kk];
                    const double* brow = b + kk * n;
                    for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
    for (; i0 < m; ++i0) {
        double* crow = c + i0 * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a[i0 * k + kk];
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
// C += A·Bᵀ with B stored [n x k]: dot-product form, 4x4 register tiles.
void mm_nt_body(const double* __restrict a, const double* __restrict b, double* __restrict c,
                std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t MR = 4, NR = 4;
    std::size_t i0 = 0;
    for (; i0 + MR <= m; i0 += MR) {
        std::size_t j0 = 0;
        for (; j0 + NR <= n; j0 += NR) {
            __m512d acc[MR][NR];
            for (std::size_t i = 0; i < MR; ++i)
                for (std::size_t j = 0; j < NR; ++j) acc[i][j] = _mm512_setzero_pd();
            std::size_t kk = 0;
            for (; kk + 8 <= k; kk += 8) {
                __m512d av[MR], bv[NR];
                for (std::size_t i = 0; i < MR; ++i)
                    av[i] = _mm512_loadu_pd(a + (i0 + i) * k + kk);
                for (std::size_t j = 0; j < NR; ++j)
                    bv[j] = _mm512_loadu_pd(b + (j0 + j) * k + kk);
                for (std::size_t i = 0; i < MR; ++i)
                    for (std::size_t j = 0; j < NR; ++j)
                        acc[i][j] = _mm512_fmadd_pd(av[i], bv[j], acc[i][j]);
            }
            for (std::size_t i = 0; i < MR; ++i)
                for (std::size_t j = 0; j < NR; ++j) {
                    double dot = _mm512_reduce_add_pd(acc[i][j]);
                    for (std::size_t kr = kk; kr < k; ++kr)
                        dot += a[(i0 + i) * k + kr] * b[(j0 + j) * k + kr];
                    c[(i0 + i) * n + j0 + j] += dot;
                }
        }
        for (; j0 < n; ++j0)
            for (std::size_t i = i0; i < i0 + MR; ++i) {
                double dot = 0.0;
                for (std::size_t kr = 0; kr < k; ++kr) dot += a[i * k + kr] * b[j0 * k + kr];
                c[i * n + j0] += dot;
            }
    }
    for (; i0 < m; ++i0)
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t kr = 0; kr < k; ++kr) dot += a[i0 * k + kr] * b[j * k + kr];
            c[i0 * n + j] += dot;
        }
}

// C += Aᵀ·B with A stored [k x m]: rank-one updates, same tile shape as nn.
void mm_tn_body(const double* __restrict a, const double* __restrict b, double* __restrict c,
                std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t MR = 4, NR = 16;
    std::size_t i0 = 0;
    for (; i0 + MR <= m; i0 += MR) {
        std::size_t j0 = 0;
        for (; j0 + NR <= n; j0 += NR) {
            __m512d c00 = _mm512_setzero_pd(), c01 = _mm512_setzero_pd();
            __m512d c10 = _mm512_setzero_pd(), c11 = _mm512_setzero_pd();
            __m512d c20 = _mm512_setzero_pd(), c21 = _mm512_setzero_pd();
            __m512d c30 = _mm512_setzero_pd(), c31 = _mm512_setzero_pd();
            const double* ap = a + i0;
            const double* bp = b + j0;
            for (std::size_t kk = 0; kk < k; ++kk, ap += m, bp += n) {
                const __m512d b0 = _mm512_loadu_pd(bp);
                const __m512d b1 = _mm512_loadu_pd(bp + 8);
                __m512d va = _mm512_set1_pd(ap[0]);
                c00 = _mm512_fmadd_pd(va, b0, c00);
                c01 = _mm512_fmadd_pd(va, b1, c01);
                va = _mm512_set1_pd(ap[1]);
                c10 = _mm512_fmadd_pd(va, b0, c10);
                c11 = _mm512_fmadd_pd(va, b1, c11);
                va = _mm512_set1_pd(ap[2]);
                c20 = _mm512_fmadd_pd(va, b0, c20);
                c21 = _mm512_fmadd_pd(va, b1, c21);
                va = _mm512_set1_pd(ap[3]);
                c30 = _mm512_fmadd_pd(va, b0, c30);
                c31 = _mm512_fmadd_pd(va, b1, c31);
            }
            double* c0 = c + (i0 + 0) * n + j0;
            double* c1 = c + (i0 + 1) * n + j0;
            double* c2 = c + (i0 + 2) * n + j0;
            double* c3 = c + (i0 + 3) * n + j0;
            _mm512_storeu_pd(c0, _mm512_add_pd(_mm512_loadu_pd(c0), c00));
            _mm512_storeu_pd(c0 + 8, _mm512_add_pd(_mm512_loadu_pd(c0 + 8), c01));
            _mm512_storeu_pd(c1, _mm512_add_pd(_mm512_loadu_pd(c1), c10));
            _mm512_storeu_pd(c1 + 8, _mm512_add_pd(_mm512_loadu_pd(c1 + 8), c11));
            _mm512_storeu_pd(c2, _mm512_add_pd(_mm512_loadu_pd(c2), c20));
            _mm512_storeu_pd(c2 + 8, _mm512_add_pd(_mm512_loadu_pd(c2 + 8), c21));
            _mm512_storeu_pd(c3, _mm512_add_pd(_mm512_loadu_pd(c3), c30));
            _mm512_storeu_pd(c3 + 8, _mm512_add_pd(_mm512_loadu_pd(c3 + 8), c31));
        }
        if (j0 < n) {
            for (std::size_t i = i0; i < i0 + MR; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double av = a[kk * m + i];
                    const double* brow = b + kk * n;
                    for (std::size_t j = j0; j < n; ++j) c[i * n + j] += av * brow[j];
                }
        }
    }
    for (; i0 < m; ++i0)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a[kk * m + i0];
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) c[i0 * n + j] += av * brow[j];
        }
}
#else
// Portable fallbacks: blocked axpy / dot-product forms.
void mm_nn_body(const double* __restrict a, const double* __restrict b, double* __restrict c,
                std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t IB = 4;
    for (std::size_t i0 = 0; i0 < m; i0 += IB) {
        const std::size_t ilim = std::min(i0 + IB, m);
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            for (std::size_t i = i0; i < ilim; ++i) {
                const double av = a[i * k + kk];
                double* crow = c + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

void mm_nt_body(const double* __restrict a, const double* __restrict b, double* __restrict c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t kr = 0; kr < k; ++kr) dot += a[i * k + kr] * b[j * k + kr];
            c[i * n + j] += dot;
        }
}

void mm_tn_body(const double* __restrict a, const double* __restrict b, double* __restrict c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* arow = a + kk * m;
        const double* brow = b + kk * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
#endif

}  // namespace

void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
    mm_nn_body(a, b, c, m, k, n);
}

void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
    mm_nt_body(a, b, c, m, k, n);
}

void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
    mm_tn_body(a, b, c, m, k, n);
}

}  // namespace kernels

// --- node construction ----------------------------------------------------------

Tensor make_node(Op op, Shape shape, std::vector<Tensor> inputs, std::uint8_t tag) {
    auto node = std::make_shared<TensorNode>();
    node->op = op;
    node->shape = std::move(shape);
    node->value.assign(shape_numel(node->shape), 0.0);
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    node->tag = tag;
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        node->requires_grad = node->requires_grad || t.requires_grad();
        node->inputs.push_back(t.node());
    }
    return Tensor(node);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    Tensor t = make_node(Op::leaf, std::move(shape), {}, 0);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("from_data: " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
    Tensor t = zeros(std::move(shape), requires_grad);
    t.node_->value = std::move(data);
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.node_->value) v = rng.normal(stddev);
    return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v, false); }

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows(): tensor is " + shape_str(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols(): tensor is " + shape_str(shape()));
    return node_->shape[1];
}

std::vector<double>& Tensor::mutable_values() {
    if (node_->op != Op::leaf)
        throw ContractError("mutable_values is restricted to leaf tensors");
    return node_->value;
}

const std::vector<double>& Tensor::grad_ref() const {
    if (node_->grad.empty()) throw ContractError("tensor has no gradient");
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const& { return grad_ref(); }

void Tensor::zero_grad() const { node_->grad.assign(node_->value.size(), 0.0); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a one-element tensor");
    return node_->value[0];
}

// --- op forwards -----------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2)
        throw DimensionError(std::string(what) + ": expected rank-2, got " + shape_str(t.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_node(Op::add, a.shape(), {a, b}, 0);
    auto& v = out.node()->value;
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_node(Op::sub, a.shape(), {a, b}, 0);
    auto& v = out.node()->value;
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_node(Op::mul, a.shape(), {a, b}, 0);
    auto& v = out.node()->value;
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
    return out;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out = make_node(Op::scale, x.shape(), {x}, 0);
    out.node()->saved = {c};
    auto& v = out.node()->value;
    const auto& xv = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * c;
    return out;
}

Tensor add_scalar(const Tensor& x, double c) {
    Tensor out = make_node(Op::add_scalar, x.shape(), {x}, 0);
    out.node()->saved = {c};
    auto& v = out.node()->value;
    const auto& xv = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] + c;
    return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("scale_by: scale must have one element");
    Tensor out = make_node(Op::scale_by, x.shape(), {x, s}, 0);
    const double c = s.values()[0];
    auto& v = out.node()->value;
    const auto& xv = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * c;
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = make_node(Op::matmul, {a.rows(), b.cols()}, {a, b}, 0);
    kernels::mm_nn(a.values().data(), b.values().data(), out.node()->value.data(), a.rows(),
                   a.cols(), b.cols());
    return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_bt");
    require_rank2(b, "matmul_bt");
    if (a.cols() != b.cols())
        throw DimensionError("matmul_bt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                             "^T");
    Tensor out = make_node(Op::matmul_bt, {a.rows(), b.rows()}, {a, b}, 0);
    kernels::mm_nt(a.values().data(), b.values().data(), out.node()->value.data(), a.rows(),
                   a.cols(), b.rows());
    return out;
}

Tensor unary(const Tensor& x, UnaryKind kind) {
    Tensor out = make_node(Op::unary, x.shape(), {x}, static_cast<std::uint8_t>(kind));
    auto& v = out.node()->value;
    const auto& xv = x.values();
    switch (kind) {
        case UnaryKind::silu: {
            auto& sig = out.node()->saved;
            sig.resize(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) {
                sig[i] = stable_sigmoid(xv[i]);
                v[i] = xv[i] * sig[i];
            }
            break;
        }
        case UnaryKind::gelu:
            // Exact erf form, not the tanh approximation.
            for (std::size_t i = 0; i < v.size(); ++i)
                v[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * 0.7071067811865475244));
            break;
        case UnaryKind::tanh:
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(xv[i]);
            break;
        case UnaryKind::sigmoid:
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = stable_sigmoid(xv[i]);
            break;
        case UnaryKind::sqrt:
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(xv[i]);
            break;
        case UnaryKind::recip:
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / xv[i];
            break;
    }
    return out;
}

namespace {

Tensor softmax_rows_impl(const Tensor& x, const Tensor* mask) {
    require_rank2(x, "softmax_rows");
    if (mask) require_same_shape(x, *mask, "softmax_rows mask");
    std::vector<Tensor> inputs = {x};
    if (mask) inputs.push_back(*mask);
    Tensor out = make_node(Op::softmax_rows, x.shape(), std::move(inputs), mask ? 1 : 0);
    const std::size_t m = x.rows(), n = x.cols();
    const auto& xv = x.values();
    const double* mv = mask ? mask->values().data() : nullptr;
    auto& v = out.node()->value;
    for (std::size_t i = 0; i < m; ++i) {
        double mx = kNegInf;
        for (std::size_t j = 0; j < n; ++j) {
            const double z = xv[i * n + j] + (mv ? mv[i * n + j] : 0.0);
            if (z > mx) mx = z;
        }
        if (mx == kNegInf)
            throw NumericError("softmax_rows: degenerate row " + std::to_string(i) +
                               " is fully masked");
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double z = xv[i * n + j] + (mv ? mv[i * n + j] : 0.0);
            const double e = (z == kNegInf) ? 0.0 : std::exp(z - mx);
            v[i * n + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] *= inv;
    }
    return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_rows_impl(x, nullptr); }
Tensor softmax_rows(const Tensor& x, const Tensor& mask) { return softmax_rows_impl(x, &mask); }

Tensor reduce(const Tensor& x, ReduceKind kind) {
    Tensor out = make_node(Op::reduce, {1}, {x}, static_cast<std::uint8_t>(kind));
    double s = 0.0;
    for (double v : x.values()) s += v;
    out.node()->value[0] = (kind == ReduceKind::mean) ? s / static_cast<double>(x.numel()) : s;
    return out;
}

Tensor reduce(const Tensor& x, ReduceKind kind, std::size_t axis) {
    require_rank2(x, "reduce");
    if (axis > 1) throw DimensionError("reduce: invalid axis " + std::to_string(axis));
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out = make_node(Op::reduce, {axis == 0 ? n : m}, {x}, static_cast<std::uint8_t>(kind));
    out.node()->indices = {axis};
    const auto& xv = x.values();
    auto& v = out.node()->value;
    if (axis == 0) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) v[j] += xv[i * n + j];
        if (kind == ReduceKind::mean)
            for (double& t : v) t /= static_cast<double>(m);
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += xv[i * n + j];
            v[i] = (kind == ReduceKind::mean) ? s / static_cast<double>(n) : s;
        }
    }
    return out;
}

Tensor embed_rows(const Tensor& table, const std::vector<std::uint32_t>& ids) {
    require_rank2(table, "embed_rows");
    const std::size_t vocab = table.rows(), d = table.cols();
    for (std::uint32_t id : ids)
        if (id >= vocab)
            throw DataError("embed_rows: token id " + std::to_string(id) + " >= vocab " +
                            std::to_string(vocab));
    Tensor out = make_node(Op::embed_rows, {ids.size(), d}, {table}, 0);
    auto& idx = out.node()->indices;
    idx.assign(ids.begin(), ids.end());
    const auto& tv = table.values();
    auto& v = out.node()->value;
    for (std::size_t t = 0; t < ids.size(); ++t)
        std::memcpy(v.data() + t * d, tv.data() + static_cast<std::size_t>(ids[t]) * d,
                    d * sizeof(double));
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t col0, std::size_t count) {
    require_rank2(x, "slice_cols");
    if (col0 + count > x.cols())
        throw DimensionError("slice_cols: [" + std::to_string(col0) + ", " +
                             std::to_string(col0 + count) + ") out of " +
                             std::to_string(x.cols()));
    Tensor out = make_node(Op::slice_cols, {x.rows(), count}, {x}, 0);
    out.node()->indices = {col0, count};
    const std::size_t n = x.cols();
    const auto& xv = x.values();
    auto& v = out.node()->value;
    for (std::size_t i = 0; i < x.rows(); ++i)
        std::memcpy(v.data() + i * count, xv.data() + i * n + col0, count * sizeof(double));
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = parts.front().rows();
    std::size_t n = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m) throw DimensionError("concat_cols: row mismatch");
        n += p.cols();
    }
    Tensor out = make_node(Op::concat_cols, {m, n}, parts, 0);
    auto& v = out.node()->value;
    std::size_t off = 0;
    auto& idx = out.node()->indices;
    for (const Tensor& p : parts) {
        idx.push_back(off);
        const std::size_t w = p.cols();
        const auto& pv = p.values();
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(v.data() + i * n + off, pv.data() + i * w, w * sizeof(double));
        off += w;
    }
    return out;
}

Tensor broadcast_row(const Tensor& v, std::size_t rows) {
    if (v.rank() != 1) throw DimensionError("broadcast_row: expected rank-1");
    const std::size_t n = v.numel();
    Tensor out = make_node(Op::broadcast_row, {rows, n}, {v}, 0);
    auto& ov = out.node()->value;
    const auto& vv = v.values();
    for (std::size_t i = 0; i < rows; ++i)
        std::memcpy(ov.data() + i * n, vv.data(), n * sizeof(double));
    return out;
}

Tensor broadcast_col(const Tensor& v, std::size_t cols) {
    if (v.rank() != 1) throw DimensionError("broadcast_col: expected rank-1");
    const std::size_t m = v.numel();
    Tensor out = make_node(Op::broadcast_col, {m, cols}, {v}, 0);
    auto& ov = out.node()->value;
    const auto& vv = v.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cols; ++j) ov[i * cols + j] = vv[i];
    return out;
}

Tensor repeat_cols(const Tensor& x, std::size_t group) {
    require_rank2(x, "repeat_cols");
    if (group == 0) throw ContractError("repeat_cols: group must be positive");
    const std::size_t m = x.rows(), g = x.cols();
    Tensor out = make_node(Op::repeat_cols, {m, g * group}, {x}, 0);
    out.node()->indices = {group};
    const auto& xv = x.values();
    auto& v = out.node()->value;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t q = 0; q < g; ++q) {
            const double val = xv[i * g + q];
            for (std::size_t r = 0; r < group; ++r) v[i * g * group + q * group + r] = val;
        }
    return out;
}

namespace {

// Cached cos/sin tables keyed by (rows, cols, base); layout [p][j] -> (cos, sin).
const std::vector<double>& rope_table(std::size_t rows, std::size_t cols, double base) {
    static std::mutex mu;
    static std::map<std::tuple<std::size_t, std::size_t, double>, std::vector<double>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_tuple(rows, cols, base);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    const std::size_t half = cols / 2;
    std::vector<double> table(rows * half * 2);
    for (std::size_t j = 0; j < half; ++j) {
        const double freq =
            std::exp(-std::log(base) * (2.0 * static_cast<double>(j) / static_cast<double>(cols)));
        for (std::size_t p = 0; p < rows; ++p) {
            const double angle = static_cast<double>(p) * freq;
            table[(p * half + j) * 2] = std::cos(angle);
            table[(p * half + j) * 2 + 1] = std::sin(angle);
        }
    }
    return cache.emplace(key, std::move(table)).first->second;
}

}  // namespace

Tensor rope_rotate(const Tensor& x, double base) {
    require_rank2(x, "rope_rotate");
    if (x.cols() % 2 != 0) throw DimensionError("rope_rotate: column count must be even");
    Tensor out = make_node(Op::rope, x.shape(), {x}, 0);
    out.node()->saved = {base};
    const std::size_t m = x.rows(), n = x.cols(), half = n / 2;
    const auto& table = rope_table(m, n, base);
    const auto& xv = x.values();
    auto& v = out.node()->value;
    for (std::size_t p = 0; p < m; ++p)
        for (std::size_t j = 0; j < half; ++j) {
            const double c = table[(p * half + j) * 2];
            const double s = table[(p * half + j) * 2 + 1];
            const double x0 = xv[p * n + 2 * j];
            const double x1 = xv[p * n + 2 * j + 1];
            v[p * n + 2 * j] = c * x0 - s * x1;
            v[p * n + 2 * j + 1] = s * x0 + c * x1;
        }
    return out;
}

Tensor masked_nll(const Tensor& logits, const std::vector<std::uint32_t>& targets,
                  std::size_t pos_min, std::size_t pos_max) {
    require_rank2(logits, "masked_nll");
    const std::size_t rows = logits.rows(), vocab = logits.cols();
    if (targets.size() != rows)
        throw DimensionError("masked_nll: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " rows");
    if (pos_min < 1 || pos_max > rows)
        throw ConfigError("masked_nll: position range [" + std::to_string(pos_min) + ", " +
                          std::to_string(pos_max) + "] outside [1, " + std::to_string(rows) + "]");
    if (pos_min > pos_max) throw ConfigError("masked_nll: empty effective position range");
    for (std::uint32_t t : targets)
        if (t >= vocab) throw DataError("masked_nll: target id " + std::to_string(t) + " >= vocab");

    Tensor out = make_node(Op::masked_nll, {1}, {logits}, 0);
    auto& idx = out.node()->indices;
    idx = {pos_min, pos_max};
    idx.insert(idx.end(), targets.begin(), targets.end());

    const std::size_t count = pos_max - pos_min + 1;
    auto& probs = out.node()->saved;  // softmax rows for the selected positions
    probs.assign(count * vocab, 0.0);
    const auto& xv = logits.values();
    double total = 0.0;
    for (std::size_t r = 0; r < count; ++r) {
        const std::size_t t = pos_min - 1 + r;
        const double* row = xv.data() + t * vocab;
        double mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            const double e = std::exp(row[j] - mx);
            probs[r * vocab + j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] *= inv;
        total += (mx + std::log(sum)) - row[targets[t]];
    }
    out.node()->value[0] = total / static_cast<double>(count);
    return out;
}

// --- backward ---------------------------------------------------------------------

namespace {

void ensure_grad(TensorNode* n) {
    if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
}

void backward_step(TensorNode* n) {
    const std::vector<double>& dy = n->grad;
    auto in = [&](std::size_t i) { return n->inputs[i].get(); };
    auto wants = [&](std::size_t i) { return n->inputs[i]->requires_grad; };
    switch (n->op) {
        case Op::leaf:
            break;
        case Op::add: {
            for (std::size_t s = 0; s < 2; ++s)
                if (wants(s)) {
                    ensure_grad(in(s));
                    auto& g = in(s)->grad;
                    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
                }
            break;
        }
        case Op::sub: {
            if (wants(0)) {
                ensure_grad(in(0));
                auto& g = in(0)->grad;
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
            }
            if (wants(1)) {
                ensure_grad(in(1));
                auto& g = in(1)->grad;
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] -= dy[i];
            }
            break;
        }
        case Op::mul: {
            if (wants(0)) {
                ensure_grad(in(0));
                auto& g = in(0)->grad;
                const auto& bv = in(1)->value;
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * bv[i];
            }
            if (wants(1)) {
                ensure_grad(in(1));
                auto& g = in(1)->grad;
                const auto& av = in(0)->value;
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * av[i];
            }
            break;
        }
        case Op::scale: {
            if (wants(0)) {
                ensure_grad(in(0));
                auto& g = in(0)->grad;
                const double c = n->saved[0];
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * c;
            }
            break;
        }
        case Op::add_scalar: {
            if (wants(0)) {
                ensure_grad(in(0));
                auto& g = in(0)->grad;
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
            }
            break;
        }
        case Op::scale_by: {
            const double c = in(1)->value[0];
            if (wants(0)) {
                ensure_grad(in(0));
                auto& g = in(0)->grad;
                for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * c;
            }
            if (wants(1)) {
                ensure_grad(in(1));
                double s = 0.0;
                const auto& xv = in(0)->value;
                for (std::size_t i = 0; i < dy.size(); ++i) s += dy[i] * xv[i];
                in(1)->grad[0] += s;
            }
            break;
        }
        case Op::matmul: {
            const std::size_t m = n->inputs[0]->shape[0];
            const std::size_t k = n->inputs[0]->shape[1];
            const std::size_t cols = n->shape[1];
            if (wants(0)) {  // dA += dC·Bᵀ
                ensure_grad(in(0));
                kernels::mm_nt(dy.data(), in(1)->value.data(), in(0)->grad.data(), m, cols, k);
            }
            if (wants(1)) {  // dB += Aᵀ·dC
                ensure_grad(in(1));
                kernels::mm_tn(in(0)->value.data(), dy.data(), in(1)->grad.data(), k, m, cols);
            }
            break;
        }
        case Op::matmul_bt: {
            const std::size_t m = n->inputs[0]->shape[0];
            const std::size_t k = n->inputs[0]->shape[1];
            const std::size_t cols = n->shape[1];  // rows of B
            if (wants(0)) {  // dA += dC·B
                ensure_grad(in(0));
                kernels::mm_nn(dy.data(), in(1)->value.data(), in(0)->grad.data(), m, cols, k);
            }
            if (wants(1)) {  // dB += dCᵀ·A
                ensure_grad(in(1));
                kernels::mm_tn(dy.data(), in(0)->value.data(), in(1)->grad.data(), cols, m, k);
            }
            break;
        }
        case Op::unary: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const auto& xv = in(0)->value;
            const auto& yv = n->value;
            switch (static_cast<UnaryKind>(n->tag)) {
                case UnaryKind::silu:
                    for (std::size_t i = 0; i < dy.size(); ++i) {
                        const double sg = n->saved[i];
                        g[i] += dy[i] * sg * (1.0 + xv[i] * (1.0 - sg));
                    }
                    break;
                case UnaryKind::gelu:
                    for (std::size_t i = 0; i < dy.size(); ++i) {
                        const double cdf =
                            0.5 * (1.0 + std::erf(xv[i] * 0.7071067811865475244));
                        const double pdf =
                            std::exp(-0.5 * xv[i] * xv[i]) * 0.3989422804014326779;
                        g[i] += dy[i] * (cdf + xv[i] * pdf);
                    }
                    break;
                case UnaryKind::tanh:
                    for (std::size_t i = 0; i < dy.size(); ++i)
                        g[i] += dy[i] * (1.0 - yv[i] * yv[i]);
                    break;
                case UnaryKind::sigmoid:
                    for (std::size_t i = 0; i < dy.size(); ++i)
                        g[i] += dy[i] * yv[i] * (1.0 - yv[i]);
                    break;
                case UnaryKind::sqrt:
                    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i] * 0.5 / yv[i];
                    break;
                case UnaryKind::recip:
                    for (std::size_t i = 0; i < dy.size(); ++i) g[i] -= dy[i] * yv[i] * yv[i];
                    break;
            }
            break;
        }
        case Op::softmax_rows: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const auto& yv = n->value;
            const std::size_t m = n->shape[0], cols = n->shape[1];
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += dy[i * cols + j] * yv[i * cols + j];
                for (std::size_t j = 0; j < cols; ++j)
                    g[i * cols + j] += yv[i * cols + j] * (dy[i * cols + j] - dot);
            }
            break;
        }
        case Op::reduce: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const bool is_mean = static_cast<ReduceKind>(n->tag) == ReduceKind::mean;
            if (n->indices.empty()) {
                const double d =
                    dy[0] / (is_mean ? static_cast<double>(in(0)->value.size()) : 1.0);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += d;
            } else {
                const std::size_t axis = n->indices[0];
                const std::size_t m = in(0)->shape[0], cols = in(0)->shape[1];
                if (axis == 0) {
                    const double inv = is_mean ? 1.0 / static_cast<double>(m) : 1.0;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += dy[j] * inv;
                } else {
                    const double inv = is_mean ? 1.0 / static_cast<double>(cols) : 1.0;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += dy[i] * inv;
                }
            }
            break;
        }
        case Op::embed_rows: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const std::size_t d = n->shape[1];
            for (std::size_t t = 0; t < n->indices.size(); ++t) {
                double* dst = g.data() + n->indices[t] * d;
                const double* src = dy.data() + t * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            break;
        }
        case Op::slice_cols: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const std::size_t col0 = n->indices[0], count = n->indices[1];
            const std::size_t cols = n->inputs[0]->shape[1];
            for (std::size_t i = 0; i < n->shape[0]; ++i)
                for (std::size_t j = 0; j < count; ++j)
                    g[i * cols + col0 + j] += dy[i * count + j];
            break;
        }
        case Op::concat_cols: {
            const std::size_t m = n->shape[0], cols = n->shape[1];
            for (std::size_t s = 0; s < n->inputs.size(); ++s) {
                if (!wants(s)) continue;
                ensure_grad(in(s));
                auto& g = in(s)->grad;
                const std::size_t off = n->indices[s], w = n->inputs[s]->shape[1];
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += dy[i * cols + off + j];
            }
            break;
        }
        case Op::broadcast_row: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const std::size_t m = n->shape[0], cols = n->shape[1];
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < cols; ++j) g[j] += dy[i * cols + j];
            break;
        }
        case Op::broadcast_col: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const std::size_t m = n->shape[0], cols = n->shape[1];
            for (std::size_t i = 0; i < m; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < cols; ++j) s += dy[i * cols + j];
                g[i] += s;
            }
            break;
        }
        case Op::repeat_cols: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const std::size_t group = n->indices[0];
            const std::size_t m = n->shape[0], gsrc = n->inputs[0]->shape[1];
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t q = 0; q < gsrc; ++q) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < group; ++r)
                        s += dy[i * gsrc * group + q * group + r];
                    g[i * gsrc + q] += s;
                }
            break;
        }
        case Op::rope: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const std::size_t m = n->shape[0], cols = n->shape[1], half = cols / 2;
            const auto& table = rope_table(m, cols, n->saved[0]);
            for (std::size_t p = 0; p < m; ++p)
                for (std::size_t j = 0; j < half; ++j) {
                    const double c = table[(p * half + j) * 2];
                    const double s = table[(p * half + j) * 2 + 1];
                    const double d0 = dy[p * cols + 2 * j];
                    const double d1 = dy[p * cols + 2 * j + 1];
                    g[p * cols + 2 * j] += c * d0 + s * d1;
                    g[p * cols + 2 * j + 1] += -s * d0 + c * d1;
                }
            break;
        }
        case Op::masked_nll: {
            if (!wants(0)) break;
            ensure_grad(in(0));
            auto& g = in(0)->grad;
            const std::size_t pos_min = n->indices[0], pos_max = n->indices[1];
            const std::size_t vocab = n->inputs[0]->shape[1];
            const std::size_t count = pos_max - pos_min + 1;
            const double gd = dy[0] / static_cast<double>(count);
            const auto& probs = n->saved;
            for (std::size_t r = 0; r < count; ++r) {
                const std::size_t t = pos_min - 1 + r;
                const std::size_t target = n->indices[2 + t];
                double* dst = g.data() + t * vocab;
                const double* p = probs.data() + r * vocab;
                for (std::size_t j = 0; j < vocab; ++j) dst[j] += p[j] * gd;
                dst[target] -= gd;
            }
            break;
        }
    }
}

}  // namespace

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward requires a one-element loss tensor");
    TensorNode* root = loss.node().get();
    if (!root->requires_grad) return;

    // Reachable subgraph, pruned to grad-requiring paths.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<TensorNode*> stack = {root};
    seen.insert(root);
    while (!stack.empty()) {
        TensorNode* cur = stack.back();
        stack.pop_back();
        order.push_back(cur);
        for (const auto& inp : cur->inputs) {
            TensorNode* p = inp.get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back(p);
        }
    }
    // Reverse creation order: every consumer is processed before its producers.
    std::sort(order.begin(), order.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->id > b->id; });
    // Interior grads are scratch for this pass; only leaf grads accumulate
    // across calls.
    for (TensorNode* node : order) {
        if (node->op == Op::leaf)
            ensure_grad(node);
        else
            node->grad.assign(node->value.size(), 0.0);
    }
    root->grad[0] += 1.0;
    for (TensorNode* node : order) backward_step(node);
}

bool all_finite(const Tensor& t) {
    for (double v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                         double step) {
    if (step <= 0.0) throw ContractError("finite_diff_check: step must be positive");
    Tensor x = Tensor::from_data(x0.shape(), x0.values(), true);
    Tensor loss = f(x);
    if (loss.numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
    backward(loss);
    std::vector<double> analytic(x0.numel(), 0.0);
    if (x.has_grad()) analytic = x.grad();

    auto eval = [&](std::size_t i, double delta) {
        std::vector<double> data = x0.values();
        data[i] += delta;
        Tensor xi = Tensor::from_data(x0.shape(), std::move(data), false);
        return f(xi).item();
    };

    double worst = 0.0;
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        const double central = (eval(i, step) - eval(i, -step)) / (2.0 * step);
        const double rel = std::abs(analytic[i] - central) /
                           (std::abs(analytic[i]) + std::abs(central) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace sinklab
