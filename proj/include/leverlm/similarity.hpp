#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "leverlm/error.hpp"

namespace leverlm {

class UndefinedSimilarityError : public Error {
public:
    using Error::Error;
};

inline double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw PreconditionError("cosine: length mismatch (" + std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()) + ")");
    }
    double dot = 0.0;
    double nu = 0.0;
    double nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) {
        throw UndefinedSimilarityError("cosine: zero vector");
    }
    const double c = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(c, -1.0, 1.0);
}

}  // namespace leverlm
