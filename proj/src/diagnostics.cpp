#include "sinklab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace sinklab {

namespace {

double median(std::vector<double> v) {
    if (v.empty()) throw ContractError("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool entry_before(const MagnitudeEntry& a, const MagnitudeEntry& b) {
    if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
    if (a.channel != b.channel) return a.channel < b.channel;
    return a.token < b.token;
}

std::vector<MagnitudeEntry> top_k_of(const Tensor& state, std::size_t k) {
    const std::size_t rows = state.rows(), cols = state.cols();
    std::vector<MagnitudeEntry> all;
    all.reserve(rows * cols);
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = state.at(t, c);
            all.push_back({std::abs(v), v, t, c});
        }
    const std::size_t keep = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + keep, all.end(), entry_before);
    all.resize(keep);
    return all;
}

// Signed value of a channel within an entry list (largest |.| occurrence), or
// 0 when the channel is absent.
double channel_value(const std::vector<MagnitudeEntry>& entries, std::size_t channel) {
    double best = 0.0;
    for (const MagnitudeEntry& e : entries)
        if (e.channel == channel && std::abs(e.value) > std::abs(best)) best = e.value;
    return best;
}

}  // namespace

MagnitudeTrace residual_trace(const ForwardTrace& trace, std::size_t top_k) {
    if (trace.post_residual.empty()) throw ContractError("residual_trace: trace not captured");
    MagnitudeTrace mt;
    mt.top_k = top_k;
    mt.post_residual.reserve(trace.post_residual.size());
    for (const Tensor& state : trace.post_residual)
        mt.post_residual.push_back(top_k_of(state, top_k));
    mt.block_output.reserve(trace.block_output.size());
    for (const Tensor& out : trace.block_output) mt.block_output.push_back(top_k_of(out, top_k));
    return mt;
}

MagnitudeTrace merge_magnitude_traces(const std::vector<MagnitudeTrace>& traces) {
    if (traces.empty()) throw ContractError("merge_magnitude_traces: nothing to merge");
    MagnitudeTrace merged;
    merged.top_k = traces.front().top_k;
    const std::size_t n_states = traces.front().post_residual.size();
    const std::size_t n_blocks = traces.front().block_output.size();
    for (const MagnitudeTrace& t : traces)
        if (t.post_residual.size() != n_states || t.block_output.size() != n_blocks)
            throw ContractError("merge_magnitude_traces: mismatched trace depths");

    auto merge_lists = [&](auto select) {
        std::vector<std::vector<MagnitudeEntry>> out;
        for (std::size_t s = 0; s < select(traces.front()).size(); ++s) {
            std::map<std::pair<std::size_t, std::size_t>, MagnitudeEntry> by_cell;
            for (const MagnitudeTrace& t : traces)
                for (const MagnitudeEntry& e : select(t)[s]) {
                    auto key = std::make_pair(e.token, e.channel);
                    auto it = by_cell.find(key);
                    if (it == by_cell.end() || e.magnitude > it->second.magnitude)
                        by_cell[key] = e;
                }
            std::vector<MagnitudeEntry> entries;
            entries.reserve(by_cell.size());
            for (auto& [key, e] : by_cell) entries.push_back(e);
            std::sort(entries.begin(), entries.end(), entry_before);
            if (entries.size() > merged.top_k) entries.resize(merged.top_k);
            out.push_back(std::move(entries));
        }
        return out;
    };
    merged.post_residual =
        merge_lists([](const MagnitudeTrace& t) -> const auto& { return t.post_residual; });
    merged.block_output =
        merge_lists([](const MagnitudeTrace& t) -> const auto& { return t.block_output; });
    return merged;
}

StepBlockReport detect_step_blocks(const MagnitudeTrace& mt, double jump) {
    if (jump <= 1.0) throw ContractError("detect_step_blocks: jump must exceed 1");
    StepBlockReport report;
    const std::size_t n_blocks = mt.block_output.size();
    if (n_blocks == 0 || mt.post_residual.size() != n_blocks + 1) return report;

    // Spike channels: within a jump factor of the global post-residual peak.
    double peak = 0.0;
    for (const auto& entries : mt.post_residual)
        for (const MagnitudeEntry& e : entries) peak = std::max(peak, e.magnitude);
    if (peak == 0.0) return report;
    std::set<std::size_t> channels;
    for (const auto& entries : mt.post_residual)
        for (const MagnitudeEntry& e : entries)
            if (e.magnitude >= peak / jump) channels.insert(e.channel);

    auto state_stat = [&](std::size_t state) {
        double best = 0.0;
        for (std::size_t c : channels)
            best = std::max(best, std::abs(channel_value(mt.post_residual[state], c)));
        return best;
    };
    auto output_stat = [&](std::size_t block) {  // 1-based
        double best = 0.0;
        for (std::size_t c : channels)
            best = std::max(best, std::abs(channel_value(mt.block_output[block - 1], c)));
        return best;
    };

    // Step-ups: block output exceeding jump x the running plateau median. The
    // window holds post-residual stats since the last step-up (the embedding
    // state seeds it), so a second surge on top of an existing plateau must
    // clear the plateau level, not the pre-spike baseline.
    std::vector<double> window = {state_stat(0)};
    for (std::size_t b = 1; b <= n_blocks; ++b) {
        const double med = median(window);
        const double stat = output_stat(b);
        if (stat > jump * med) {
            const double ratio =
                med > 0.0 ? stat / med : std::numeric_limits<double>::infinity();
            report.step_up.push_back({b, ratio});
            window.clear();
        }
        window.push_back(state_stat(b));
    }
    if (report.step_up.empty()) return report;

    // Step-downs: later outputs cancelling the plateau (opposite sign,
    // magnitude at least plateau/jump).
    const std::size_t last_up = report.step_up.back().block;
    std::map<std::size_t, double> plateau;
    for (std::size_t c : channels) {
        double best = 0.0;
        for (std::size_t s = last_up; s < mt.post_residual.size(); ++s) {
            const double v = channel_value(mt.post_residual[s], c);
            if (std::abs(v) > std::abs(best)) best = v;
        }
        if (best != 0.0) plateau[c] = best;
    }
    for (std::size_t b = last_up + 1; b <= n_blocks; ++b) {
        double ratio = 0.0;
        for (const auto& [c, pl] : plateau) {
            const double out = channel_value(mt.block_output[b - 1], c);
            if (out == 0.0 || (out > 0.0) == (pl > 0.0)) continue;
            if (std::abs(out) >= std::abs(pl) / jump)
                ratio = std::max(ratio, std::abs(out) / std::abs(pl));
        }
        if (ratio > 0.0) report.step_down.push_back({b, ratio});
    }
    return report;
}

SpikeReport detect_spikes(const ForwardTrace& trace, double abs_floor, double rel_factor) {
    if (trace.post_residual.empty()) throw ContractError("detect_spikes: trace not captured");
    SpikeReport report;
    const std::size_t n_blocks = trace.block_output.size();
    // Intermediate post-residual states: after blocks 3 .. 2L-2.
    if (n_blocks < 5) return report;
    const std::size_t first = 3, last = n_blocks - 2;
    const std::size_t tokens = trace.post_residual[0].rows();
    const std::size_t d = trace.post_residual[0].cols();

    std::vector<double> token_max(tokens, 0.0);
    for (std::size_t s = first; s <= last; ++s) {
        const Tensor& state = trace.post_residual[s];
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t c = 0; c < d; ++c)
                token_max[t] = std::max(token_max[t], std::abs(state.at(t, c)));
    }
    report.max_spike = *std::max_element(token_max.begin(), token_max.end());
    report.threshold = std::max(abs_floor, rel_factor * median(token_max));

    // Peak magnitude per cell across the intermediate states.
    std::map<std::pair<std::size_t, std::size_t>, double> cell_peak;
    std::set<std::size_t> channel_set;
    std::set<std::size_t> token_set;
    for (std::size_t s = first; s <= last; ++s) {
        const Tensor& state = trace.post_residual[s];
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t c = 0; c < d; ++c) {
                const double mag = std::abs(state.at(t, c));
                if (mag > report.threshold) {
                    auto& peak = cell_peak[{t, c}];
                    peak = std::max(peak, mag);
                    channel_set.insert(c);
                    token_set.insert(t);
                }
            }
    }
    report.spike_channels.assign(channel_set.begin(), channel_set.end());
    report.spike_tokens.assign(token_set.begin(), token_set.end());

    // Property-(iv) ratio matrix: mean peak-magnitude ratio across spike tokens.
    const std::size_t nc = report.spike_channels.size();
    report.channel_ratio_matrix.assign(nc, std::vector<double>(nc, 0.0));
    auto peak_at = [&](std::size_t t, std::size_t c) {
        double best = 0.0;
        for (std::size_t s = first; s <= last; ++s)
            best = std::max(best, std::abs(trace.post_residual[s].at(t, c)));
        return best;
    };
    for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t j = 0; j < nc; ++j) {
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t t : report.spike_tokens) {
                const double a = peak_at(t, report.spike_channels[i]);
                const double b = peak_at(t, report.spike_channels[j]);
                if (b > 0.0) {
                    sum += a / b;
                    ++n;
                }
            }
            report.channel_ratio_matrix[i][j] = n > 0 ? sum / static_cast<double>(n) : 0.0;
        }
    return report;
}

std::vector<double> importance_scores(const Tensor& attn) {
    if (attn.rank() != 2 || attn.rows() != attn.cols())
        throw DimensionError("importance_scores: expected a square attention matrix");
    const std::size_t t = attn.rows();
    for (std::size_t i = 0; i < t; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < t; ++j) row_sum += attn.at(i, j);
        if (std::abs(row_sum - 1.0) > 1e-6)
            throw ContractError("importance_scores: row " + std::to_string(i) +
                                " sums to " + std::to_string(row_sum));
    }
    std::vector<double> alpha(t, 0.0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) alpha[j] += attn.at(i, j);
    for (double& a : alpha) a /= static_cast<double>(t);
    return alpha;
}

double sink_ratio(const std::vector<Tensor>& head_attns, double epsilon) {
    if (head_attns.empty()) throw ContractError("sink_ratio: no attention matrices");
    std::size_t sinks = 0;
    for (const Tensor& attn : head_attns) {
        const std::vector<double> alpha = importance_scores(attn);
        const std::size_t half = alpha.size() / 2;
        double max_first_half = 0.0;
        for (std::size_t k = 0; k < half; ++k) max_first_half = std::max(max_first_half, alpha[k]);
        if (max_first_half > epsilon) ++sinks;
    }
    return static_cast<double>(sinks) / static_cast<double>(head_attns.size());
}

SinkReport sink_report(const ForwardTrace& trace, double epsilon) {
    SinkReport report;
    report.epsilon = epsilon;
    std::size_t sinks = 0, total = 0;
    for (std::size_t b = 0; b < trace.attention.size(); ++b) {
        for (std::size_t h = 0; h < trace.attention[b].size(); ++h) {
            HeadSinkScore score;
            score.block = b + 1;
            score.head = h;
            score.alpha = importance_scores(trace.attention[b][h]);
            report.seq_len = score.alpha.size();
            const std::size_t half = score.alpha.size() / 2;
            for (std::size_t k = 0; k < half; ++k)
                score.max_first_half = std::max(score.max_first_half, score.alpha[k]);
            score.is_sink = score.max_first_half > epsilon;
            sinks += score.is_sink ? 1 : 0;
            ++total;
            report.heads.push_back(std::move(score));
        }
    }
    if (total == 0) throw ContractError("sink_report: trace has no attention maps");
    report.ratio = static_cast<double>(sinks) / static_cast<double>(total);
    return report;
}

QuadraticFormResult quadratic_form(const FfnParams& ffn, std::size_t channel) {
    if (!ffn.w_gate.defined() || !ffn.w_up.defined() || !ffn.w_down.defined())
        throw ContractError("quadratic_form: block is not a swiglu ffn");
    const std::size_t d_ffn = ffn.w_gate.rows(), d = ffn.w_gate.cols();
    if (channel >= ffn.w_down.rows())
        throw DimensionError("quadratic_form: channel " + std::to_string(channel) +
                             " out of range");
    QuadraticFormResult result;
    result.channel = channel;
    std::vector<double> u(d * d, 0.0);
    const auto& gate = ffn.w_gate.values();
    const auto& up = ffn.w_up.values();
    const auto& down = ffn.w_down.values();
    for (std::size_t i = 0; i < d_ffn; ++i) {
        const double w = down[channel * d_ffn + i];
        if (w == 0.0) continue;
        const double* g = gate.data() + i * d;
        const double* p = up.data() + i * d;
        for (std::size_t a = 0; a < d; ++a) {
            const double wg = w * g[a];
            double* row = u.data() + a * d;
            for (std::size_t b = 0; b < d; ++b) row[b] += wg * p[b];
        }
    }
    double frob = 0.0;
    for (double v : u) frob += v * v;
    result.frobenius = std::sqrt(frob);
    std::vector<double> s(d * d);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) s[a * d + b] = 0.5 * (u[a * d + b] + u[b * d + a]);
    result.u = Tensor::from_data({d, d}, std::move(u));
    result.s = Tensor::from_data({d, d}, std::move(s));
    return result;
}

namespace {

void require_symmetric(const Tensor& s) {
    if (s.rank() != 2 || s.rows() != s.cols())
        throw DimensionError("expected a square matrix, got " + shape_str(s.shape()));
    const std::size_t n = s.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(s.at(i, j) - s.at(j, i)) > 1e-9)
                throw ContractError("matrix is not symmetric within 1e-9");
}

}  // namespace

EigenResult top_eigenpair(const Tensor& s, double tol, std::size_t max_iter) {
    require_symmetric(s);
    const std::size_t n = s.rows();
    const auto& sv = s.values();

    auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            const double* row = sv.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
            y[i] = acc;
        }
    };
    auto norm2 = [](const std::vector<double>& x) {
        double acc = 0.0;
        for (double v : x) acc += v * v;
        return std::sqrt(acc);
    };

    Rng rng(0x5eed);
    std::vector<double> v(n), sv1(n), sv2(n);
    for (double& x : v) x = rng.normal();
    double nv = norm2(v);
    for (double& x : v) x /= nv;

    EigenResult result;
    double residual = std::numeric_limits<double>::infinity();
    for (std::size_t it = 1; it <= max_iter; ++it) {
        apply(v, sv1);         // S v
        double rayleigh = 0.0;
        for (std::size_t i = 0; i < n; ++i) rayleigh += v[i] * sv1[i];
        residual = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = sv1[i] - rayleigh * v[i];
            residual += r * r;
        }
        residual = std::sqrt(residual);
        result.iterations = it;
        if (residual <= tol * std::max(std::abs(rayleigh), 1e-300)) {
            result.lambda = rayleigh;
            result.vec = v;
            result.residual = residual;
            return result;
        }
        apply(sv1, sv2);       // S^2 v, squaring makes the iteration sign-blind
        const double nw = norm2(sv2);
        if (nw == 0.0) {       // v is in the null space and S v was already ~0
            result.lambda = 0.0;
            result.vec = v;
            result.residual = residual;
            return result;
        }
        for (std::size_t i = 0; i < n; ++i) v[i] = sv2[i] / nw;
    }
    throw ConvergenceError("top_eigenpair: no convergence in " + std::to_string(max_iter) +
                               " iterations (degenerate |lambda| tie?)",
                           residual);
}

std::vector<std::vector<double>> shared_direction_similarity(
    const std::vector<EigenResult>& results) {
    const std::size_t n = results.size();
    for (const EigenResult& r : results)
        if (r.vec.size() != results.front().vec.size())
            throw DimensionError("shared_direction_similarity: mixed eigenvector dimensions");
    std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < results[i].vec.size(); ++k) {
                dot += results[i].vec[k] * results[j].vec[k];
                na += results[i].vec[k] * results[i].vec[k];
                nb += results[j].vec[k] * results[j].vec[k];
            }
            out[i][j] = std::abs(dot) / std::max(std::sqrt(na * nb), 1e-300);
        }
    return out;
}

std::vector<double> symmetric_eigenvalues(const Tensor& s) {
    require_symmetric(s);
    const std::size_t n = s.rows();
    std::vector<double> a = s.values();

    double frob = 0.0;
    for (double v : a) frob += v * v;
    frob = std::sqrt(frob);
    const double stop = std::max(1e-14 * frob, 1e-300);

    for (std::size_t sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a[i * n + j] * a[i * n + j];
        if (std::sqrt(off) < stop) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) continue;
                const double app = a[p * n + p], aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sJ = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - sJ * akq;
                    a[k * n + q] = sJ * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sJ * aqk;
                    a[q * n + k] = sJ * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end(),
              [](double x, double y) { return std::abs(x) > std::abs(y); });
    return eig;
}

std::vector<std::size_t> flag_high_gain_channels(const std::vector<double>& frobenius,
                                                 double factor) {
    if (frobenius.empty()) return {};
    const double med = median(frobenius);
    std::vector<std::size_t> flagged;
    for (std::size_t k = 0; k < frobenius.size(); ++k)
        if (frobenius[k] > factor * med) flagged.push_back(k);
    return flagged;
}

RegimeStats silu_regime_stats(const FfnParams& ffn, const Tensor& inputs) {
    if (!ffn.w_gate.defined()) throw ContractError("silu_regime_stats: block is not swiglu");
    const std::size_t rows = inputs.rows(), d = inputs.cols(), d_ffn = ffn.w_gate.rows();
    if (d != ffn.w_gate.cols())
        throw DimensionError("silu_regime_stats: input width " + std::to_string(d) +
                             " vs gate width " + std::to_string(ffn.w_gate.cols()));
    std::vector<double> pre(rows * d_ffn, 0.0);
    kernels::mm_nt(inputs.values().data(), ffn.w_gate.values().data(), pre.data(), rows, d, d_ffn);

    RegimeStats stats;
    stats.cosine.resize(rows);
    stats.norm_ratio.resize(rows);
    stats.valid.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0, npre = 0.0, npost = 0.0;
        for (std::size_t i = 0; i < d_ffn; ++i) {
            const double x = pre[r * d_ffn + i];
            const double sig = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                        : std::exp(x) / (1.0 + std::exp(x));
            const double y = x * sig;
            dot += x * y;
            npre += x * x;
            npost += y * y;
        }
        if (npre == 0.0) {
            stats.valid[r] = false;
            stats.cosine[r] = 0.0;
            stats.norm_ratio[r] = 0.0;
            continue;
        }
        stats.valid[r] = true;
        stats.cosine[r] = npost > 0.0 ? dot / std::sqrt(npre * npost) : 0.0;
        stats.norm_ratio[r] = std::sqrt(npost / npre);
    }
    return stats;
}

double vocab_position_probe(const Parameters& params, const ModelConfig& cfg,
                            std::size_t position, const std::vector<std::uint32_t>& vocab_subset,
                            double abs_floor, double rel_factor) {
    if (position >= cfg.max_seq)
        throw ContractError("vocab_position_probe: position past max_seq");
    if (vocab_subset.empty()) throw ContractError("vocab_position_probe: empty vocab subset");
    const std::uint32_t filler = 32 % cfg.vocab_size;
    std::size_t hits = 0;
    for (std::uint32_t token : vocab_subset) {
        std::vector<std::uint32_t> context(position + 1, filler);
        context[position] = token;
        ModelOutput out = model_forward(context, params, cfg, true);
        SpikeReport report = detect_spikes(*out.trace, abs_floor, rel_factor);
        if (std::find(report.spike_tokens.begin(), report.spike_tokens.end(), position) !=
            report.spike_tokens.end())
            ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(vocab_subset.size());
}

Tensor vo_matrix(const AttentionParams& attn, const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model, dh = cfg.d_head;
    std::vector<double> vo(d * d, 0.0);
    const auto& wv = attn.wv.values();  // [d x n_heads*dh]
    const auto& wo = attn.wo.values();  // [n_heads*dh x d]
    const std::size_t width = cfg.attn_width();
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        // W_V^(h) spans columns h*dh.., W_O^(h) spans rows h*dh..
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t k = 0; k < dh; ++k) {
                const double v = wv[a * width + h * dh + k];
                const double* orow = wo.data() + (h * dh + k) * d;
                double* dst = vo.data() + a * d;
                for (std::size_t b = 0; b < d; ++b) dst[b] += v * orow[b];
            }
    }
    return Tensor::from_data({d, d}, std::move(vo));
}

std::vector<std::vector<double>> spike_cosine_matrix(const std::vector<Tensor>& states,
                                                     SpikeNormalizer normalizer) {
    if (states.size() < 2) throw ContractError("spike_cosine_matrix: need at least two vectors");
    std::vector<std::vector<double>> rows;
    rows.reserve(states.size());
    for (const Tensor& h : states) {
        if (h.rank() != 1) throw DimensionError("spike_cosine_matrix: expected rank-1 states");
        std::vector<double> v = h.values();
        if (normalizer == SpikeNormalizer::rmsnorm) {
            double nsq = 0.0;
            for (double x : v) nsq += x * x;
            const double factor =
                std::sqrt(static_cast<double>(v.size())) / std::sqrt(nsq + 1e-16);
            for (double& x : v) x *= factor;
        }
        rows.push_back(std::move(v));
    }
    const std::size_t n = rows.size();
    std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t k = 0; k < rows[i].size(); ++k) {
                dot += rows[i][k] * rows[j][k];
                na += rows[i][k] * rows[i][k];
                nb += rows[j][k] * rows[j][k];
            }
            out[i][j] = dot / std::max(std::sqrt(na * nb), 1e-300);
        }
    return out;
}

double normalized_sparsity(const Tensor& h, const std::vector<std::size_t>& channels) {
    if (h.rank() != 1) throw DimensionError("normalized_sparsity: expected a rank-1 vector");
    if (channels.empty()) throw ContractError("normalized_sparsity: empty channel set");
    double nsq = 0.0;
    for (double x : h.values()) nsq += x * x;
    if (nsq == 0.0) throw NumericError("normalized_sparsity: zero vector");
    // RMS normalization rescales every coordinate identically, so the energy
    // fraction can be read off the raw vector.
    double selected = 0.0;
    for (std::size_t c : channels) {
        if (c >= h.numel()) throw DimensionError("normalized_sparsity: channel out of range");
        selected += h.at(c) * h.at(c);
    }
    return selected / nsq;
}

bool rmsnorm_bound_check(const Tensor& h) {
    if (h.rank() != 1) throw DimensionError("rmsnorm_bound_check: expected a rank-1 vector");
    double nsq = 0.0;
    for (double x : h.values()) nsq += x * x;
    if (nsq == 0.0) throw NumericError("rmsnorm_bound_check: zero vector");
    const double d = static_cast<double>(h.numel());
    const double factor = std::sqrt(d) / std::sqrt(nsq);
    double worst = 0.0;
    for (double x : h.values()) worst = std::max(worst, std::abs(x * factor));
    return worst <= std::sqrt(d) + 1e-9;
}

double head_sum_check(const AttentionParams& attn, const ModelConfig& cfg, const Tensor& h) {
    if (h.rank() != 2 || h.cols() != cfg.d_model)
        throw DimensionError("head_sum_check: input must be [T x d_model]");
    const std::size_t t = h.rows(), d = cfg.d_model, dh = cfg.d_head, width = cfg.attn_width();

    // Route 1: the model's concat-projection path, gates off.
    ModelConfig ungated = cfg;
    ungated.gate_kind = GateKind::none;
    std::vector<std::uint32_t> dummy_tokens(t, 0);
    Tensor x = Tensor::from_data(h.shape(), h.values());
    AttentionResult concat_route = attention_block(x, attn, ungated, dummy_tokens, Tensor());

    // Route 2: per-head sum, recomputed with plain loops from the weights.
    const auto& hv = h.values();
    const auto& wq = attn.wq.values();
    const auto& wk = attn.wk.values();
    const auto& wv = attn.wv.values();
    const auto& wo = attn.wo.values();
    std::vector<double> total(t * d, 0.0);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
        std::vector<double> q(t * dh, 0.0), k(t * dh, 0.0), v(t * dh, 0.0);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t c = 0; c < dh; ++c) {
                double aq = 0.0, ak = 0.0, av = 0.0;
                for (std::size_t a = 0; a < d; ++a) {
                    const double x0 = hv[i * d + a];
                    aq += x0 * wq[a * width + head * dh + c];
                    ak += x0 * wk[a * width + head * dh + c];
                    av += x0 * wv[a * width + head * dh + c];
                }
                q[i * dh + c] = aq;
                k[i * dh + c] = ak;
                v[i * dh + c] = av;
            }
        if (cfg.norm_kind == NormKind::sandwich_qk) {
            auto qk_norm = [&](std::vector<double>& m) {
                for (std::size_t i = 0; i < t; ++i) {
                    double nsq = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) nsq += m[i * dh + c] * m[i * dh + c];
                    const double f = std::sqrt(static_cast<double>(dh)) /
                                     std::sqrt(nsq + 1e-8 * 1e-8);
                    for (std::size_t c = 0; c < dh; ++c) m[i * dh + c] *= f;
                }
            };
            qk_norm(q);
            qk_norm(k);
        }
        auto rotate = [&](std::vector<double>& m) {
            for (std::size_t p = 0; p < t; ++p)
                for (std::size_t j = 0; j < dh / 2; ++j) {
                    const double angle =
                        static_cast<double>(p) *
                        std::pow(cfg.rope_base,
                                 -2.0 * static_cast<double>(j) / static_cast<double>(dh));
                    const double c = std::cos(angle), s = std::sin(angle);
                    const double a0 = m[p * dh + 2 * j], a1 = m[p * dh + 2 * j + 1];
                    m[p * dh + 2 * j] = c * a0 - s * a1;
                    m[p * dh + 2 * j + 1] = s * a0 + c * a1;
                }
        };
        rotate(q);
        rotate(k);
        std::vector<double> a(t * t, 0.0);
        for (std::size_t i = 0; i < t; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += q[i * dh + c] * k[j * dh + c];
                a[i * t + j] = dot * inv_sqrt_dh;
                mx = std::max(mx, a[i * t + j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                a[i * t + j] = std::exp(a[i * t + j] - mx);
                sum += a[i * t + j];
            }
            for (std::size_t j = 0; j <= i; ++j) a[i * t + j] /= sum;
        }
        // A^(h) (H W_V^(h)) W_O^(h)
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                const double aij = a[i * t + j];
                for (std::size_t c = 0; c < dh; ++c) {
                    const double contrib = aij * v[j * dh + c];
                    const double* orow = wo.data() + (head * dh + c) * d;
                    for (std::size_t b = 0; b < d; ++b) total[i * d + b] += contrib * orow[b];
                }
            }
    }

    double worst = 0.0;
    for (std::size_t i = 0; i < t * d; ++i)
        worst = std::max(worst, std::abs(concat_route.out.values()[i] - total[i]));
    return worst;
}

}  // namespace sinklab
