#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sinklab/tensor.hpp"

namespace sinklab {

enum class NormKind : std::uint8_t { pre_norm, sandwich, sandwich_qk, dynamic_tanh };
enum class FfnKind : std::uint8_t { swiglu, gelu2, linear, attention_only };
enum class GateKind : std::uint8_t {
    none,
    cond_channel,
    cond_head,
    cond_single,
    uncond_channel,
    uncond_head,
    uncond_single,
    static_positional,
    static_token,
};

const char* to_string(NormKind k);
const char* to_string(FfnKind k);
const char* to_string(GateKind k);
NormKind norm_kind_from_string(const std::string& s);
FfnKind ffn_kind_from_string(const std::string& s);
GateKind gate_kind_from_string(const std::string& s);

struct ModelConfig {
    std::size_t n_layers = 4;    // L; the model has 2L blocks
    std::size_t d_model = 128;
    std::size_t n_heads = 8;
    std::size_t d_head = 16;
    std::size_t d_ffn = 344;
    std::size_t vocab_size = 256;
    std::size_t max_seq = 64;
    NormKind norm_kind = NormKind::pre_norm;
    FfnKind ffn_kind = FfnKind::swiglu;
    GateKind gate_kind = GateKind::none;
    double rope_base = 10000.0;

    std::size_t n_blocks() const { return 2 * n_layers; }
    std::size_t attn_width() const { return n_heads * d_head; }
    // Block i (1-based) is attention when i is odd, and also when even under
    // attention_only.
    bool block_is_attention(std::size_t block_index_1based) const {
        return block_index_1based % 2 == 1 || ffn_kind == FfnKind::attention_only;
    }
    void validate() const;  // throws ConfigError

    bool operator==(const ModelConfig&) const = default;
};

// One normalization site. Which fields are defined depends on norm_kind.
struct NormSiteParams {
    Tensor scale;                          // rmsnorm scale [d]
    Tensor dyt_alpha, dyt_gamma, dyt_beta; // DynamicTanh parameters
};

struct AttentionParams {
    Tensor wq, wk, wv;       // [d_model x n_heads*d_head]
    Tensor wo;               // [n_heads*d_head x d_model]
    NormSiteParams in_norm;  // undefined under sandwich_qk
    Tensor out_norm_scale;   // sandwich only
    Tensor gate_w;           // cond_* / static_* gate projection
    Tensor gate_logit;       // uncond_* learned logits
    Tensor gate_pos;         // static_positional table [max_seq x d_model]
};

struct FfnParams {
    Tensor w_gate, w_up;     // [d_ffn x d_model]
    Tensor w_down;           // [d_model x d_ffn]
    Tensor w_lin;            // linear kind only: [d_model x d_model]
    NormSiteParams in_norm;
    Tensor out_norm_scale;   // sandwich only
};

struct Block {
    bool is_attention = true;
    AttentionParams attn;
    FfnParams ffn;
};

struct Parameters {
    Tensor embedding;  // [vocab x d_model]
    std::vector<Block> blocks;
    NormSiteParams final_norm;
    Tensor w_head;     // [d_model x vocab]

    // Every defined parameter tensor with a stable name, in creation order.
    std::vector<std::pair<std::string, Tensor>> named() const;
};

// Captured intermediate states of one forward pass. All tensors are detached
// values; holding a trace does not keep the autodiff tape alive.
struct ForwardTrace {
    std::vector<Tensor> post_residual;          // 2L+1 states, embedding first
    std::vector<Tensor> block_output;           // 2L block contributions
    std::vector<Tensor> block_input;            // 2L per-site inputs handed to each block body
    std::vector<std::vector<Tensor>> attention; // per block: per-head A, empty for ffn blocks
    Tensor logits;
};

struct ModelOutput {
    Tensor logits;
    std::optional<ForwardTrace> trace;
};

// Deterministic init: normals with std 0.02, output projections (wo, w_down)
// scaled by 1/sqrt(2L), norm scales 1, DynamicTanh alpha 0.5 / gamma 1 / beta 0,
// unconditional gate logits 0.
Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed);

// Row-wise sqrt(d) * h/||h|| with ||h|| <- sqrt(||h||^2 + eps^2), eps = 1e-8,
// then an elementwise scale.
Tensor rmsnorm(const Tensor& h, const Tensor& scale);
Tensor rmsnorm_unit(const Tensor& h);  // scale-free variant

// gamma ⊙ tanh(alpha·h) + beta, elementwise.
Tensor dynamic_tanh(const Tensor& h, const Tensor& alpha, const Tensor& gamma,
                    const Tensor& beta);

// Causal additive mask: 0 on and below the diagonal, -inf above. Cached per T.
Tensor causal_mask(std::size_t t);

struct AttentionResult {
    Tensor out;                      // [T x d_model]
    std::vector<Tensor> head_probs;  // per-head A [T x T]
};

// Full attention block body: projections, per-head RoPE'd causal attention,
// optional gating, concat-projection. `x` is the (already site-normalized)
// block input except under sandwich_qk, where it is the raw residual state and
// Q/K are RMS-normalized per head after projection.
AttentionResult attention_block(const Tensor& x, const AttentionParams& params,
                                const ModelConfig& cfg, const std::vector<std::uint32_t>& tokens,
                                const Tensor& embedding);

// Multiplies concatenated head outputs by sigmoid gates of the configured kind.
Tensor gate_apply(const Tensor& heads, const Tensor& x, const AttentionParams& params,
                  const ModelConfig& cfg, const std::vector<std::uint32_t>& tokens,
                  const Tensor& embedding);

Tensor ffn_block(const Tensor& x, const FfnParams& params, const ModelConfig& cfg);

struct ResidualResult {
    Tensor h_next;        // h + contribution
    Tensor contribution;  // what the block added to the stream
    Tensor body_input;    // what the body saw (normalized per kind)
};

// Residual wiring per normalization kind:
//   pre_norm:     h + F(norm(h))
//   sandwich:     h + norm2(F(norm1(h)))
//   sandwich_qk:  h + F(h)            (Q/K normalization lives inside attention)
//   dynamic_tanh: h + F(DyT(h))
ResidualResult residual_block(const Tensor& h, NormKind kind, const NormSiteParams& in_norm,
                              const Tensor& out_norm_scale,
                              const std::function<Tensor(const Tensor&)>& body);

ModelOutput model_forward(const std::vector<std::uint32_t>& tokens, const Parameters& params,
                          const ModelConfig& cfg, bool capture);

Tensor detach(const Tensor& t);

}  // namespace sinklab
