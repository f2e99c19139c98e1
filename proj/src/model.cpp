#include "sinklab/model.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <mutex>

namespace sinklab {

namespace {
constexpr double kRmsEps = 1e-8;
}

const char* to_string(NormKind k) {
    switch (k) {
        case NormKind::pre_norm: return "pre_norm";
        case NormKind::sandwich: return "sandwich";
        case NormKind::sandwich_qk: return "sandwich_qk";
        case NormKind::dynamic_tanh: return "dynamic_tanh";
    }
    return "?";
}

const char* to_string(FfnKind k) {
    switch (k) {
        case FfnKind::swiglu: return "swiglu";
        case FfnKind::gelu2: return "gelu2";
        case FfnKind::linear: return "linear";
        case FfnKind::attention_only: return "attention_only";
    }
    return "?";
}

const char* to_string(GateKind k) {
    switch (k) {
        case GateKind::none: return "none";
        case GateKind::cond_channel: return "cond_channel";
        case GateKind::cond_head: return "cond_head";
        case GateKind::cond_single: return "cond_single";
        case GateKind::uncond_channel: return "uncond_channel";
        case GateKind::uncond_head: return "uncond_head";
        case GateKind::uncond_single: return "uncond_single";
        case GateKind::static_positional: return "static_positional";
        case GateKind::static_token: return "static_token";
    }
    return "?";
}

NormKind norm_kind_from_string(const std::string& s) {
    for (NormKind k : {NormKind::pre_norm, NormKind::sandwich, NormKind::sandwich_qk,
                       NormKind::dynamic_tanh})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown norm_kind '" + s + "'");
}

FfnKind ffn_kind_from_string(const std::string& s) {
    for (FfnKind k : {FfnKind::swiglu, FfnKind::gelu2, FfnKind::linear, FfnKind::attention_only})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown ffn_kind '" + s + "'");
}

GateKind gate_kind_from_string(const std::string& s) {
    for (GateKind k :
         {GateKind::none, GateKind::cond_channel, GateKind::cond_head, GateKind::cond_single,
          GateKind::uncond_channel, GateKind::uncond_head, GateKind::uncond_single,
          GateKind::static_positional, GateKind::static_token})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown gate_kind '" + s + "'");
}

void ModelConfig::validate() const {
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (d_model == 0) throw ConfigError("d_model must be positive");
    if (n_heads == 0) throw ConfigError("n_heads must be positive");
    if (d_head == 0) throw ConfigError("d_head must be positive");
    if (d_head % 2 != 0) throw ConfigError("d_head must be even (RoPE pairs coordinates)");
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (max_seq == 0) throw ConfigError("max_seq must be positive");
    if (rope_base <= 1.0) throw ConfigError("rope_base must exceed 1");
    if (d_ffn == 0 && (ffn_kind == FfnKind::swiglu || ffn_kind == FfnKind::gelu2))
        throw ConfigError("d_ffn must be positive for swiglu/gelu2 blocks");
}

// --- parameter construction ---------------------------------------------------

namespace {

NormSiteParams make_norm_site(const ModelConfig& cfg) {
    NormSiteParams site;
    if (cfg.norm_kind == NormKind::dynamic_tanh) {
        site.dyt_alpha = Tensor::full({1}, 0.5, true);
        site.dyt_gamma = Tensor::full({cfg.d_model}, 1.0, true);
        site.dyt_beta = Tensor::zeros({cfg.d_model}, true);
    } else {
        site.scale = Tensor::full({cfg.d_model}, 1.0, true);
    }
    return site;
}

void scale_values(Tensor& t, double factor) {
    for (double& v : t.mutable_values()) v *= factor;
}

AttentionParams make_attention_params(const ModelConfig& cfg, Rng& rng, double out_scale) {
    AttentionParams p;
    const std::size_t width = cfg.attn_width();
    p.wq = Tensor::randn({cfg.d_model, width}, rng, 0.02, true);
    p.wk = Tensor::randn({cfg.d_model, width}, rng, 0.02, true);
    p.wv = Tensor::randn({cfg.d_model, width}, rng, 0.02, true);
    p.wo = Tensor::randn({width, cfg.d_model}, rng, 0.02, true);
    scale_values(p.wo, out_scale);
    if (cfg.norm_kind != NormKind::sandwich_qk) p.in_norm = make_norm_site(cfg);
    if (cfg.norm_kind == NormKind::sandwich)
        p.out_norm_scale = Tensor::full({cfg.d_model}, 1.0, true);
    switch (cfg.gate_kind) {
        case GateKind::none:
            break;
        case GateKind::cond_channel:
            p.gate_w = Tensor::randn({cfg.d_model, width}, rng, 0.02, true);
            break;
        case GateKind::cond_head:
            p.gate_w = Tensor::randn({cfg.d_model, cfg.n_heads}, rng, 0.02, true);
            break;
        case GateKind::cond_single:
            p.gate_w = Tensor::randn({cfg.d_model, 1}, rng, 0.02, true);
            break;
        case GateKind::uncond_channel:
            p.gate_logit = Tensor::zeros({width}, true);
            break;
        case GateKind::uncond_head:
            p.gate_logit = Tensor::zeros({cfg.n_heads}, true);
            break;
        case GateKind::uncond_single:
            p.gate_logit = Tensor::zeros({1}, true);
            break;
        case GateKind::static_positional:
            p.gate_pos = Tensor::randn({cfg.max_seq, cfg.d_model}, rng, 0.02, true);
            p.gate_w = Tensor::randn({cfg.d_model, cfg.n_heads}, rng, 0.02, true);
            break;
        case GateKind::static_token:
            p.gate_w = Tensor::randn({cfg.d_model, cfg.n_heads}, rng, 0.02, true);
            break;
    }
    return p;
}

FfnParams make_ffn_params(const ModelConfig& cfg, Rng& rng, double out_scale) {
    FfnParams p;
    switch (cfg.ffn_kind) {
        case FfnKind::swiglu:
            p.w_gate = Tensor::randn({cfg.d_ffn, cfg.d_model}, rng, 0.02, true);
            p.w_up = Tensor::randn({cfg.d_ffn, cfg.d_model}, rng, 0.02, true);
            p.w_down = Tensor::randn({cfg.d_model, cfg.d_ffn}, rng, 0.02, true);
            scale_values(p.w_down, out_scale);
            break;
        case FfnKind::gelu2:
            p.w_up = Tensor::randn({cfg.d_ffn, cfg.d_model}, rng, 0.02, true);
            p.w_down = Tensor::randn({cfg.d_model, cfg.d_ffn}, rng, 0.02, true);
            scale_values(p.w_down, out_scale);
            break;
        case FfnKind::linear:
            p.w_lin = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.02, true);
            scale_values(p.w_lin, out_scale);
            break;
        case FfnKind::attention_only:
            throw ContractError("attention_only configs have no ffn blocks");
    }
    // The ffn path keeps a pre-norm site under sandwich_qk.
    if (cfg.norm_kind == NormKind::sandwich_qk) {
        p.in_norm.scale = Tensor::full({cfg.d_model}, 1.0, true);
    } else {
        p.in_norm = make_norm_site(cfg);
    }
    if (cfg.norm_kind == NormKind::sandwich)
        p.out_norm_scale = Tensor::full({cfg.d_model}, 1.0, true);
    return p;
}

void add_site(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
              const NormSiteParams& site) {
    if (site.scale.defined()) out.emplace_back(prefix + "norm_scale", site.scale);
    if (site.dyt_alpha.defined()) out.emplace_back(prefix + "dyt_alpha", site.dyt_alpha);
    if (site.dyt_gamma.defined()) out.emplace_back(prefix + "dyt_gamma", site.dyt_gamma);
    if (site.dyt_beta.defined()) out.emplace_back(prefix + "dyt_beta", site.dyt_beta);
}

}  // namespace

Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Parameters params;
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    params.embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.02, true);
    params.blocks.resize(cfg.n_blocks());
    for (std::size_t i = 1; i <= cfg.n_blocks(); ++i) {
        Block& b = params.blocks[i - 1];
        b.is_attention = cfg.block_is_attention(i);
        if (b.is_attention)
            b.attn = make_attention_params(cfg, rng, out_scale);
        else
            b.ffn = make_ffn_params(cfg, rng, out_scale);
    }
    params.final_norm = make_norm_site(cfg);
    params.w_head = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, 0.02, true);
    return params;
}

std::vector<std::pair<std::string, Tensor>> Parameters::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", embedding);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "block." + std::to_string(i + 1) + ".";
        const Block& b = blocks[i];
        if (b.is_attention) {
            out.emplace_back(prefix + "wq", b.attn.wq);
            out.emplace_back(prefix + "wk", b.attn.wk);
            out.emplace_back(prefix + "wv", b.attn.wv);
            out.emplace_back(prefix + "wo", b.attn.wo);
            add_site(out, prefix, b.attn.in_norm);
            if (b.attn.out_norm_scale.defined())
                out.emplace_back(prefix + "norm2_scale", b.attn.out_norm_scale);
            if (b.attn.gate_w.defined()) out.emplace_back(prefix + "gate_w", b.attn.gate_w);
            if (b.attn.gate_logit.defined())
                out.emplace_back(prefix + "gate_logit", b.attn.gate_logit);
            if (b.attn.gate_pos.defined()) out.emplace_back(prefix + "gate_pos", b.attn.gate_pos);
        } else {
            if (b.ffn.w_gate.defined()) out.emplace_back(prefix + "w_gate", b.ffn.w_gate);
            if (b.ffn.w_up.defined()) out.emplace_back(prefix + "w_up", b.ffn.w_up);
            if (b.ffn.w_down.defined()) out.emplace_back(prefix + "w_down", b.ffn.w_down);
            if (b.ffn.w_lin.defined()) out.emplace_back(prefix + "w_lin", b.ffn.w_lin);
            add_site(out, prefix, b.ffn.in_norm);
            if (b.ffn.out_norm_scale.defined())
                out.emplace_back(prefix + "norm2_scale", b.ffn.out_norm_scale);
        }
    }
    add_site(out, "final.", final_norm);
    out.emplace_back("head.w", w_head);
    return out;
}

// --- building blocks ------------------------------------------------------------

Tensor rmsnorm_unit(const Tensor& h) {
    const std::size_t d = h.cols();
    Tensor sumsq = reduce(mul(h, h), ReduceKind::sum, 1);                    // [T]
    Tensor norm = unary(add_scalar(sumsq, kRmsEps * kRmsEps), UnaryKind::sqrt);
    Tensor inv = scale(unary(norm, UnaryKind::recip), std::sqrt(static_cast<double>(d)));
    return mul(h, broadcast_col(inv, d));
}

Tensor rmsnorm(const Tensor& h, const Tensor& scale_vec) {
    if (scale_vec.rank() != 1 || scale_vec.numel() != h.cols())
        throw DimensionError("rmsnorm: scale " + shape_str(scale_vec.shape()) + " for " +
                             shape_str(h.shape()));
    return mul(rmsnorm_unit(h), broadcast_row(scale_vec, h.rows()));
}

Tensor dynamic_tanh(const Tensor& h, const Tensor& alpha, const Tensor& gamma,
                    const Tensor& beta) {
    Tensor t = unary(scale_by(h, alpha), UnaryKind::tanh);
    return add(mul(t, broadcast_row(gamma, h.rows())), broadcast_row(beta, h.rows()));
}

Tensor causal_mask(std::size_t t) {
    static std::mutex mu;
    static std::map<std::size_t, std::vector<double>> cache;
    std::vector<double>* data = nullptr;
    {
        std::lock_guard<std::mutex> lock(mu);
        auto it = cache.find(t);
        if (it == cache.end()) {
            std::vector<double> m(t * t, 0.0);
            const double neg_inf = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = neg_inf;
            it = cache.emplace(t, std::move(m)).first;
        }
        data = &it->second;
    }
    return Tensor::from_data({t, t}, *data, false);
}

Tensor gate_apply(const Tensor& heads, const Tensor& x, const AttentionParams& params,
                  const ModelConfig& cfg, const std::vector<std::uint32_t>& tokens,
                  const Tensor& embedding) {
    const std::size_t t = heads.rows();
    switch (cfg.gate_kind) {
        case GateKind::none:
            throw ContractError("gate_apply called with gate_kind none");
        case GateKind::cond_channel:
            return mul(heads, unary(matmul(x, params.gate_w), UnaryKind::sigmoid));
        case GateKind::cond_head:
            return mul(heads, repeat_cols(unary(matmul(x, params.gate_w), UnaryKind::sigmoid),
                                          cfg.d_head));
        case GateKind::cond_single:
            return mul(heads, repeat_cols(unary(matmul(x, params.gate_w), UnaryKind::sigmoid),
                                          cfg.attn_width()));
        case GateKind::uncond_channel:
            return mul(heads, broadcast_row(unary(params.gate_logit, UnaryKind::sigmoid), t));
        case GateKind::uncond_head:
            return mul(heads,
                       repeat_cols(broadcast_row(unary(params.gate_logit, UnaryKind::sigmoid), t),
                                   cfg.d_head));
        case GateKind::uncond_single:
            return mul(heads,
                       repeat_cols(broadcast_row(unary(params.gate_logit, UnaryKind::sigmoid), t),
                                   cfg.attn_width()));
        case GateKind::static_positional: {
            std::vector<std::uint32_t> positions(t);
            for (std::size_t p = 0; p < t; ++p) positions[p] = static_cast<std::uint32_t>(p);
            Tensor sel = embed_rows(params.gate_pos, positions);
            return mul(heads, repeat_cols(unary(matmul(sel, params.gate_w), UnaryKind::sigmoid),
                                          cfg.d_head));
        }
        case GateKind::static_token: {
            Tensor sel = embed_rows(embedding, tokens);
            return mul(heads, repeat_cols(unary(matmul(sel, params.gate_w), UnaryKind::sigmoid),
                                          cfg.d_head));
        }
    }
    throw ContractError("unreachable gate kind");
}

AttentionResult attention_block(const Tensor& x, const AttentionParams& params,
                                const ModelConfig& cfg, const std::vector<std::uint32_t>& tokens,
                                const Tensor& embedding) {
    const std::size_t t = x.rows();
    const std::size_t dh = cfg.d_head;
    Tensor q = matmul(x, params.wq);
    Tensor k = matmul(x, params.wk);
    Tensor v = matmul(x, params.wv);
    Tensor mask = causal_mask(t);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Tensor> outs;
    std::vector<Tensor> probs;
    outs.reserve(cfg.n_heads);
    probs.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        if (cfg.norm_kind == NormKind::sandwich_qk) {
            qh = rmsnorm_unit(qh);
            kh = rmsnorm_unit(kh);
        }
        qh = rope_rotate(qh, cfg.rope_base);
        kh = rope_rotate(kh, cfg.rope_base);
        Tensor scores = scale(matmul_bt(qh, kh), inv_sqrt_dh);
        Tensor a = softmax_rows(scores, mask);
        probs.push_back(a);
        outs.push_back(matmul(a, vh));
    }
    Tensor heads = concat_cols(outs);
    if (cfg.gate_kind != GateKind::none)
        heads = gate_apply(heads, x, params, cfg, tokens, embedding);
    return {matmul(heads, params.wo), std::move(probs)};
}

Tensor ffn_block(const Tensor& x, const FfnParams& params, const ModelConfig& cfg) {
    switch (cfg.ffn_kind) {
        case FfnKind::swiglu: {
            Tensor gate = unary(matmul_bt(x, params.w_gate), UnaryKind::silu);
            Tensor up = matmul_bt(x, params.w_up);
            return matmul_bt(mul(gate, up), params.w_down);
        }
        case FfnKind::gelu2:
            return matmul_bt(unary(matmul_bt(x, params.w_up), UnaryKind::gelu), params.w_down);
        case FfnKind::linear:
            return matmul(x, params.w_lin);
        case FfnKind::attention_only:
            throw ContractError("ffn_block called under attention_only");
    }
    throw ContractError("unreachable ffn kind");
}

namespace {

Tensor apply_norm_site(const Tensor& h, NormKind kind, const NormSiteParams& site) {
    switch (kind) {
        case NormKind::pre_norm:
        case NormKind::sandwich:
            return rmsnorm(h, site.scale);
        case NormKind::sandwich_qk:
            return rmsnorm(h, site.scale);  // ffn path / final site keep rmsnorm
        case NormKind::dynamic_tanh:
            return dynamic_tanh(h, site.dyt_alpha, site.dyt_gamma, site.dyt_beta);
    }
    throw ContractError("unreachable norm kind");
}

}  // namespace

ResidualResult residual_block(const Tensor& h, NormKind kind, const NormSiteParams& in_norm,
                              const Tensor& out_norm_scale,
                              const std::function<Tensor(const Tensor&)>& body) {
    Tensor body_input;
    switch (kind) {
        case NormKind::pre_norm:
        case NormKind::sandwich:
            body_input = rmsnorm(h, in_norm.scale);
            break;
        case NormKind::sandwich_qk:
            body_input = h;  // normalization happens on the Q/K paths inside attention
            break;
        case NormKind::dynamic_tanh:
            body_input = dynamic_tanh(h, in_norm.dyt_alpha, in_norm.dyt_gamma, in_norm.dyt_beta);
            break;
    }
    Tensor contribution = body(body_input);
    if (kind == NormKind::sandwich) contribution = rmsnorm(contribution, out_norm_scale);
    return {add(h, contribution), contribution, body_input};
}

Tensor detach(const Tensor& t) { return Tensor::from_data(t.shape(), t.values(), false); }

ModelOutput model_forward(const std::vector<std::uint32_t>& tokens, const Parameters& params,
                          const ModelConfig& cfg, bool capture) {
    if (tokens.empty()) throw ContractError("model_forward: empty token sequence");
    if (tokens.size() > cfg.max_seq)
        throw ContractError("model_forward: sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq " + std::to_string(cfg.max_seq));

    ModelOutput out;
    if (capture) out.trace.emplace();

    Tensor h = embed_rows(params.embedding, tokens);
    if (capture) out.trace->post_residual.push_back(detach(h));

    for (std::size_t i = 0; i < cfg.n_blocks(); ++i) {
        const Block& block = params.blocks[i];
        std::vector<Tensor> head_probs;
        auto body = [&](const Tensor& x) -> Tensor {
            if (block.is_attention) {
                AttentionResult r = attention_block(x, block.attn, cfg, tokens, params.embedding);
                head_probs = std::move(r.head_probs);
                return r.out;
            }
            return ffn_block(x, block.ffn, cfg);
        };
        // The ffn path retains a plain pre-norm site under sandwich_qk.
        NormKind kind = cfg.norm_kind;
        if (kind == NormKind::sandwich_qk && !block.is_attention) kind = NormKind::pre_norm;
        const NormSiteParams& in_norm = block.is_attention ? block.attn.in_norm : block.ffn.in_norm;
        const Tensor& out_scale =
            block.is_attention ? block.attn.out_norm_scale : block.ffn.out_norm_scale;
        ResidualResult r = residual_block(h, kind, in_norm, out_scale, body);
        h = r.h_next;
        if (capture) {
            out.trace->post_residual.push_back(detach(h));
            out.trace->block_output.push_back(detach(r.contribution));
            out.trace->block_input.push_back(detach(r.body_input));
            std::vector<Tensor> detached;
            detached.reserve(head_probs.size());
            for (const Tensor& a : head_probs) detached.push_back(detach(a));
            out.trace->attention.push_back(std::move(detached));
        }
    }

    Tensor final_in = apply_norm_site(h, cfg.norm_kind, params.final_norm);
    out.logits = matmul(final_in, params.w_head);
    if (capture) out.trace->logits = detach(out.logits);
    return out;
}

}  // namespace sinklab
