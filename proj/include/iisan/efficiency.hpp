#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "iisan/errors.hpp"
#include "iisan/model.hpp"

namespace iisan {

// One method's measured (training time, trainable parameters, peak memory).
struct CostSample {
    std::string method;
    double t_seconds = 0.0;
    double params = 0.0;
    double mem_bytes = 0.0;
};

struct TpmeWeights {
    double alpha1 = 0.45;  // training time
    double alpha2 = 0.10;  // trainable parameters
    double alpha3 = 0.45;  // memory

    void validate() const {
        auto in01 = [](double a) { return a >= 0.0 && a <= 1.0; };
        if (!in01(alpha1) || !in01(alpha2) || !in01(alpha3))
            throw ConfigError("tpme: weights must lie in [0,1]");
        if (std::abs(alpha1 + alpha2 + alpha3 - 1.0) > 1e-9)
            throw ConfigError("tpme: weights must sum to 1");
    }
};

// Min-max normalizes each axis across the compared methods and returns the
// weighted sum in percent. An axis where all methods coincide contributes 0.
inline std::vector<double> tpme(const std::vector<CostSample>& samples,
                                const TpmeWeights& weights = {}) {
    weights.validate();
    if (samples.size() < 2)
        throw ConfigError("tpme: comparative metric needs at least two methods");
    auto norm_axis = [&](auto getter) {
        double lo = getter(samples[0]), hi = lo;
        for (const auto& s : samples) {
            lo = std::min(lo, getter(s));
            hi = std::max(hi, getter(s));
        }
        std::vector<double> out;
        out.reserve(samples.size());
        for (const auto& s : samples)
            out.push_back(hi == lo ? 0.0 : (getter(s) - lo) / (hi - lo));
        return out;
    };
    auto tn = norm_axis([](const CostSample& s) { return s.t_seconds; });
    auto pn = norm_axis([](const CostSample& s) { return s.params; });
    auto mn = norm_axis([](const CostSample& s) { return s.mem_bytes; });
    std::vector<double> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        out.push_back(100.0 * (weights.alpha1 * tn[i] + weights.alpha2 * pn[i] +
                               weights.alpha3 * mn[i]));
    return out;
}

// ---- memory accounting ------------------------------------------------------

struct MemoryBreakdown {
    std::size_t weights_bytes = 0;
    std::size_t grad_bytes = 0;       // == trainable weight bytes
    std::size_t optimizer_bytes = 0;  // == 2x trainable weight bytes (Adam moments)
    std::size_t activation_bytes = 0; // peak retained by the tape

    std::size_t total() const {
        return weights_bytes + grad_bytes + optimizer_bytes + activation_bytes;
    }
};

inline MemoryBreakdown memory_breakdown(const ItemModel& model,
                                        std::size_t peak_activation_bytes) {
    MemoryBreakdown mb;
    const bool cached_run = model.method() == Method::iisan_cached;
    mb.weights_bytes = model.resident_weight_bytes(cached_run);
    std::size_t trainable_bytes = 0;
    for (const auto& p : model.trainable_params()) trainable_bytes += p.tensor.bytes();
    mb.grad_bytes = trainable_bytes;
    mb.optimizer_bytes = 2 * trainable_bytes;
    mb.activation_bytes = peak_activation_bytes;
    return mb;
}

// ---- epoch measurement ------------------------------------------------------

struct EpochStats {
    double loss = 0.0;
    double wall_seconds = 0.0;
    std::size_t peak_retained_bytes = 0;
    std::size_t peak_tape_nodes = 0;
};

// t = median epoch wall time with the warm-up epoch excluded.
inline CostSample measure_epoch(const std::string& method, const std::vector<EpochStats>& epochs,
                                std::size_t trainable_params, const MemoryBreakdown& mem) {
    if (epochs.size() < 3)
        throw ConfigError("measure_epoch: need at least 3 timed epochs, got " +
                          std::to_string(epochs.size()));
    std::vector<double> times;
    for (std::size_t i = 1; i < epochs.size(); ++i) times.push_back(epochs[i].wall_seconds);
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    const double median = n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    CostSample cs;
    cs.method = method;
    cs.t_seconds = median;
    cs.params = static_cast<double>(trainable_params);
    cs.mem_bytes = static_cast<double>(mem.total());
    return cs;
}

// ---- analytic cost model ----------------------------------------------------

struct ModelShape {
    std::size_t layers = 4;
    std::size_t hidden_dim = 32;
    std::size_t text_seq = 8;
    std::size_t image_seq = 10;
    std::size_t bottleneck = 8;    // shared by adapter / lora / sanb defaults
    std::size_t kept_blocks = 4;   // SANBs per tower
    std::size_t seq_dim = 64;
    std::size_t seq_blocks = 2;
    std::size_t seq_len = 10;
    std::size_t batch_items = 64;  // distinct items embedded per step
    std::size_t batch_users = 32;  // user sequences per step
};

// Shared magnitude terms: upper-case for the backbone, lower-case for the
// method-specific modules. Flop proxies for time, byte proxies for memory.
struct CostTerms {
    double FP = 0, fp = 0, BP = 0, bp = 0, WU = 0, wu = 0;
    double MW = 0, mw = 0, A = 0, a = 0;
};

struct CostModelRow {
    std::string method;
    double time = 0;
    double params = 0;
    double memory = 0;
};

inline CostTerms analytic_terms(const ModelShape& s, Method m) {
    const double d = static_cast<double>(s.hidden_dim);
    const double L = static_cast<double>(s.layers);
    const double tok = static_cast<double>(s.text_seq + s.image_seq);  // both encoders
    const double items = static_cast<double>(s.batch_items);
    const double users = static_cast<double>(s.batch_users);
    const double flops_per_update = 150.0;  // Adam: moments, bias correction, write-back
    CostTerms t;
    // per-token transformer block ~ 12 d^2 multiply-adds, per training step
    t.FP = items * 2.0 * L * 12.0 * d * d * tok;
    t.BP = 2.0 * t.FP;  // dx and dW paths
    const double backbone_params = 2.0 * (L * (12.0 * d * d + 9.0 * d) + 300.0 * d);
    t.WU = flops_per_update * backbone_params;
    t.MW = backbone_params * 8.0;
    t.A = items * 2.0 * L * 20.0 * d * tok * 8.0;  // retained forward activations

    const double r = static_cast<double>(s.bottleneck);
    double side_params = 0.0, side_flops = 0.0, side_act = 0.0;
    switch (m) {
        case Method::fft:
            break;
        case Method::adapter:
            side_params = 2.0 * 2.0 * L * (2.0 * d * r + d + r);
            side_flops = items * 2.0 * 2.0 * L * 2.0 * d * r * tok / 2.0;
            // only the bottleneck activations are extra: the d-dim inputs are
            // already retained by the backbone tape
            side_act = items * 2.0 * 2.0 * L * r * tok / 2.0 * 8.0;
            break;
        case Method::lora:
            side_params = 2.0 * 2.0 * L * 2.0 * d * r;
            side_flops = items * 2.0 * 2.0 * L * 2.0 * d * r * tok / 2.0;
            side_act = items * 2.0 * 2.0 * L * r * tok / 2.0 * 8.0;
            break;
        case Method::iisan:
        case Method::iisan_cached: {
            const double blocks = 3.0 * static_cast<double>(s.kept_blocks);
            side_params = blocks * (2.0 * d * r + d + r) + 3.0 * d * static_cast<double>(s.seq_dim);
            side_flops = items * blocks * 2.0 * d * r;  // pooled vectors, not full sequences
            side_act = items * blocks * (d + r) * 8.0;  // pooled inputs are not on the tape
            break;
        }
    }
    const double head_params =
        static_cast<double>(s.seq_blocks) * (12.0 * s.seq_dim * s.seq_dim) +
        2.0 * d * static_cast<double>(s.seq_dim);
    const double head_flops = users * static_cast<double>(s.seq_blocks) * 12.0 *
                              static_cast<double>(s.seq_dim * s.seq_dim * s.seq_len);
    t.fp = side_flops + head_flops;
    t.bp = 2.0 * t.fp;
    t.mw = (side_params + head_params) * 8.0;
    t.wu = flops_per_update * (side_params + head_params);
    t.a = side_act + users * static_cast<double>(s.seq_blocks) * 20.0 *
                         static_cast<double>(s.seq_dim * s.seq_len) * 8.0;
    return t;
}

inline CostModelRow analytic_cost(const ModelShape& s, Method m) {
    const CostTerms t = analytic_terms(s, m);
    CostModelRow row;
    row.method = method_name(m);
    switch (m) {
        case Method::fft:
            row.time = t.FP + t.fp + t.BP + t.bp + t.WU + t.wu;
            row.params = t.MW / 8.0 + t.mw / 8.0;
            row.memory = 4.0 * (t.MW + t.mw) + t.A + t.a;
            break;
        case Method::adapter:
        case Method::lora:
            row.time = t.FP + t.fp + t.BP + t.bp + t.wu;
            row.params = t.mw / 8.0;
            row.memory = t.MW + 4.0 * t.mw + t.A + t.a;
            break;
        case Method::iisan:
            row.time = t.FP + t.fp + t.bp + t.wu;
            row.params = t.mw / 8.0;
            row.memory = t.MW + 4.0 * t.mw + t.a;
            break;
        case Method::iisan_cached:
            row.time = t.fp + t.bp + t.wu;
            row.params = t.mw / 8.0;
            row.memory = 4.0 * t.mw + t.a;
            break;
    }
    return row;
}

}  // namespace iisan
