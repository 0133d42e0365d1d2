#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "iisan/errors.hpp"
#include "iisan/tensor.hpp"

namespace iisan {

// Standard Adam with bias correction, one (m, v) moment pair per parameter.
class AdamState {
public:
    AdamState(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void register_params(const std::vector<NamedParam>& params) {
        for (const auto& p : params) {
            auto& mv = moments_[p.tensor.id()];
            mv.m.assign(p.tensor.numel(), 0.0);
            mv.v.assign(p.tensor.numel(), 0.0);
        }
    }

    std::size_t step_count() const { return step_; }
    double lr() const { return lr_; }

    // Moment storage is exactly two doubles per trainable parameter.
    std::size_t moment_bytes() const {
        std::size_t total = 0;
        for (const auto& [id, mv] : moments_) total += (mv.m.size() + mv.v.size()) * sizeof(double);
        return total;
    }

    void step(std::vector<NamedParam>& params, const GradMap& grads) {
        if (grads.size() != params.size())
            throw Error("adam_step: gradient map has " + std::to_string(grads.size()) +
                        " entries for " + std::to_string(params.size()) + " parameters");
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (auto& p : params) {
            const auto* g = grads.find(p.tensor);
            if (!g) throw Error("adam_step: missing gradient for parameter " + p.name);
            auto& mv = moments_.at(p.tensor.id());
            auto& vals = p.tensor.mutable_values();
            for (std::size_t i = 0; i < vals.size(); ++i) {
                mv.m[i] = beta1_ * mv.m[i] + (1.0 - beta1_) * (*g)[i];
                mv.v[i] = beta2_ * mv.v[i] + (1.0 - beta2_) * (*g)[i] * (*g)[i];
                const double mhat = mv.m[i] / bc1;
                const double vhat = mv.v[i] / bc2;
                vals[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    std::unordered_map<const TensorImpl*, Moments> moments_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t step_ = 0;
};

inline void adam_step(AdamState& state, std::vector<NamedParam>& params, const GradMap& grads) {
    state.step(params, grads);
}

}  // namespace iisan
