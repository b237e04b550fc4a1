#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace feddgm {

/// Host-side Adam over a flat double vector.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    template <typename G>
    void step(std::vector<double>& params, const std::vector<G>& grad) {
        if (m_.size() != params.size()) {
            m_.assign(params.size(), 0.0);
            v_.assign(params.size(), 0.0);
        }
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
            v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
            params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

} // namespace feddgm
