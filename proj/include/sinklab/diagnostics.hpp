#pragma once

#include <cstdint>
#include <vector>

#include "sinklab/model.hpp"

namespace sinklab {

// --- residual-stream magnitude traces -------------------------------------------

struct MagnitudeEntry {
    double magnitude = 0.0;  // |value|
    double value = 0.0;      // signed coordinate
    std::size_t token = 0;
    std::size_t channel = 0;
};

// Top-k absolute coordinates per post-residual state (embedding state first,
// then one per block) and per block output. Entries are sorted by magnitude
// descending, ties by lower channel then lower token.
struct MagnitudeTrace {
    std::size_t top_k = 0;
    std::vector<std::vector<MagnitudeEntry>> post_residual;  // 2L+1 states
    std::vector<std::vector<MagnitudeEntry>> block_output;   // 2L blocks, block i at [i-1]
};

MagnitudeTrace residual_trace(const ForwardTrace& trace, std::size_t top_k);

// Merge per-sequence traces into one (top-k per state over the union,
// deduplicated by (token, channel) keeping the largest magnitude).
MagnitudeTrace merge_magnitude_traces(const std::vector<MagnitudeTrace>& traces);

// --- step-up / step-down detection -----------------------------------------------

struct StepEvent {
    std::size_t block = 0;  // 1-based
    double ratio = 0.0;
};

// step_up ratios are block-output max over the running plateau median
// (>= jump when flagged); step_down ratios are |block output| / plateau
// magnitude (>= 1/jump when flagged, sign opposite the plateau).
struct StepBlockReport {
    std::vector<StepEvent> step_up;
    std::vector<StepEvent> step_down;
};

StepBlockReport detect_step_blocks(const MagnitudeTrace& mt, double jump);

// --- spike detection --------------------------------------------------------------

struct SpikeReport {
    std::vector<std::size_t> spike_channels;  // sorted ascending
    std::vector<std::size_t> spike_tokens;    // sorted ascending
    // channel_ratio_matrix[i][j]: mean over spike tokens of the peak magnitude
    // ratio channel_i / channel_j.
    std::vector<std::vector<double>> channel_ratio_matrix;
    double max_spike = 0.0;   // max |post-residual| over intermediate blocks
    double threshold = 0.0;   // the cell threshold that was applied
};

// A cell (token, channel) spikes when |value| > max(abs_floor, rel_factor *
// median over tokens of the per-token max |coordinate|) in any intermediate
// post-residual state. Intermediate excludes the first and last two blocks.
SpikeReport detect_spikes(const ForwardTrace& trace, double abs_floor, double rel_factor);

// --- attention-sink metrics --------------------------------------------------------

// Column means of a row-stochastic attention matrix; rows must sum to 1
// within 1e-6 (causal zeros above the diagonal are fine).
std::vector<double> importance_scores(const Tensor& attn);

// Fraction of heads whose max importance score over key positions
// k <= floor(T/2) exceeds epsilon.
double sink_ratio(const std::vector<Tensor>& head_attns, double epsilon);

struct HeadSinkScore {
    std::size_t block = 0;  // 1-based attention block index
    std::size_t head = 0;
    std::vector<double> alpha;
    double max_first_half = 0.0;
    bool is_sink = false;
};

struct SinkReport {
    std::vector<HeadSinkScore> heads;
    double ratio = 0.0;
    double epsilon = 0.0;
    std::size_t seq_len = 0;
};

SinkReport sink_report(const ForwardTrace& trace, double epsilon);

// --- SwiGLU quadratic-form analysis -------------------------------------------------

struct QuadraticFormResult {
    std::size_t channel = 0;
    Tensor u;          // [d_model x d_model]
    Tensor s;          // (u + u^T)/2
    double frobenius = 0.0;  // ||u||_F
};

// U_k = sum_i w_down[k,i] * outer(w_gate row i, w_up row i).
QuadraticFormResult quadratic_form(const FfnParams& ffn, std::size_t channel);

struct EigenResult {
    double lambda = 0.0;       // dominant-by-magnitude eigenvalue
    std::vector<double> vec;   // unit eigenvector
    double residual = 0.0;     // ||S v - lambda v||
    std::size_t iterations = 0;
};

// Power iteration on S^2 with Rayleigh-quotient sign recovery. Degenerate
// +/-lambda ties surface as a convergence error rather than a silent pick.
EigenResult top_eigenpair(const Tensor& s, double tol = 1e-10, std::size_t max_iter = 10000);

// Pairwise |cosine| between dominant eigenvectors (sign is arbitrary).
std::vector<std::vector<double>> shared_direction_similarity(
    const std::vector<EigenResult>& results);

// All eigenvalues of a symmetric matrix (cyclic Jacobi), sorted by |.| descending.
std::vector<double> symmetric_eigenvalues(const Tensor& s);

// Channels whose Frobenius norm exceeds factor * median norm.
std::vector<std::size_t> flag_high_gain_channels(const std::vector<double>& frobenius,
                                                 double factor);

// --- gating-regime and normalization metrics ----------------------------------------

struct RegimeStats {
    std::vector<double> cosine;      // cos(pre-activation, SiLU(pre-activation)) per row
    std::vector<double> norm_ratio;  // ||SiLU(pre)|| / ||pre|| per row
    std::vector<bool> valid;         // false when the pre-activation norm is zero
};

// Compares each row's gate pre-activation vector against its SiLU image.
RegimeStats silu_regime_stats(const FfnParams& ffn, const Tensor& inputs);

// Fraction of probed tokens that manifest as spike tokens when placed at the
// given position in a minimal context (filler byte 32 before it).
double vocab_position_probe(const Parameters& params, const ModelConfig& cfg,
                            std::size_t position, const std::vector<std::uint32_t>& vocab_subset,
                            double abs_floor, double rel_factor);

// W_VO = sum over heads of W_V^(h) W_O^(h), the fixed linear map governing the
// first token's attention output.
Tensor vo_matrix(const AttentionParams& attn, const ModelConfig& cfg);

enum class SpikeNormalizer { identity, rmsnorm };

// Pairwise cosines of normalizer(h) across the given hidden vectors.
std::vector<std::vector<double>> spike_cosine_matrix(const std::vector<Tensor>& states,
                                                     SpikeNormalizer normalizer);

// Energy fraction of the RMS-normalized vector inside the channel set.
double normalized_sparsity(const Tensor& h, const std::vector<std::size_t>& channels);

// True iff max |RMSNorm(h)_i| <= sqrt(d) + 1e-9; false signals a bug.
bool rmsnorm_bound_check(const Tensor& h);

// Evaluates the concat-projection attention output and the per-head sum
// independently; returns the max absolute deviation. Gates are ignored.
double head_sum_check(const AttentionParams& attn, const ModelConfig& cfg, const Tensor& h);

}  // namespace sinklab
