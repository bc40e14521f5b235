#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace specee {

/// Numerically stable softmax; the normalizer is accumulated in double.
inline std::vector<float> softmax(std::span<const float> logits)
{
    if (logits.empty())
        throw std::invalid_argument("softmax of empty vector");
    float mx = logits[0];
    for (float v : logits) {
        if (!std::isfinite(v))
            throw std::domain_error("non-finite logit");
        mx = std::max(mx, v);
    }
    std::vector<double> e(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp(static_cast<double>(logits[i]) - mx);
        sum += e[i];
    }
    std::vector<float> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
        out[i] = static_cast<float>(e[i] / sum);
    return out;
}

}  // namespace specee
