#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/lever_model.hpp"
#include "leverlm/parallel.hpp"
#include "leverlm/rng.hpp"
#include "leverlm/tensor.hpp"

namespace leverlm {

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-3;
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    double warmup_fraction = 0.05;
    std::uint64_t seed = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Linear warmup from 0 to base_lr over ceil(warmup_fraction * total) steps,
// then cosine decay to 0 at total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
    if (total_steps == 0) return 0.0;
    step = std::min(step, total_steps);
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (warmup > 0 && step <= warmup) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (warmup >= total_steps) return base_lr;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

struct TrainState {
    std::size_t step = 0;
    ParamSet first_moment;
    ParamSet second_moment;
    std::uint64_t seed = 0;
    double best_loss = std::numeric_limits<double>::infinity();

    static TrainState for_params(const ParamSet& params, std::uint64_t seed = 0) {
        TrainState s;
        s.first_moment = params.zeros_like();
        s.second_moment = params.zeros_like();
        s.seed = seed;
        return s;
    }
};

// AdamW: params shrink by lr * weight_decay, then take the bias-corrected
// adaptive step. Frozen tensors are left alone.
inline void optimizer_step(ParamSet& params, const ParamSet& grads, TrainState& state, const AdamWHyper& h) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw SchemaError("optimizer_step: tensor count mismatch");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const auto& g = grads[i].tensor;
        auto& m = state.first_moment[i].tensor;
        auto& v = state.second_moment[i].tensor;
        if (g.shape != p.tensor.shape || m.shape != p.tensor.shape || v.shape != p.tensor.shape) {
            throw SchemaError("optimizer_step: shape mismatch for tensor '" + p.name + "'");
        }
        if (!p.trainable) continue;
        for (std::size_t k = 0; k < p.tensor.data.size(); ++k) {
            double& w = p.tensor.data[k];
            w -= h.lr * h.weight_decay * w;
            m.data[k] = h.beta1 * m.data[k] + (1.0 - h.beta1) * g.data[k];
            v.data[k] = h.beta2 * v.data[k] + (1.0 - h.beta2) * g.data[k] * g.data[k];
            const double mhat = m.data[k] / c1;
            const double vhat = v.data[k] / c2;
            w -= h.lr * mhat / (std::sqrt(vhat) + h.epsilon);
        }
    }
}

// Batch gradients accumulate into a fixed number of lanes (sample i goes to
// lane i mod kGradientLanes, in sample order) and the lanes are reduced in
// lane order, so the sum is identical for any thread count.
inline constexpr std::size_t kGradientLanes = 8;

inline LossAndGrad batch_gradients(const LeverLM& model, std::span<const TrainingSample> batch, std::size_t threads) {
    LossAndGrad out{0.0, model.params.zeros_like()};
    if (batch.empty()) return out;
    const double scale = 1.0 / static_cast<double>(batch.size());
    const std::size_t lanes = std::min(kGradientLanes, batch.size());
    std::vector<ParamSet> buffers(lanes, model.params.zeros_like());
    std::vector<double> losses(lanes, 0.0);
    parallel_for(lanes, threads, [&](std::size_t lane) {
        for (std::size_t i = lane; i < batch.size(); i += lanes) {
            losses[lane] += accumulate_gradients(model, batch[i], buffers[lane], 1.0);
        }
    });
    for (std::size_t lane = 0; lane < lanes; ++lane) {
        out.loss += scale * losses[lane];
        out.grads.add_scaled(buffers[lane], scale);
    }
    out.grads.check_finite("backward");
    return out;
}

struct LossRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct TrainResult {
    std::vector<LossRecord> history;
    TrainState state;
};

// Expands records into (anchor, sequence) samples in record order.
inline std::vector<TrainingSample> training_samples(std::span<const ConstructionRecord> records,
                                                    const ExampleIndex& anchors) {
    std::vector<TrainingSample> samples;
    std::size_t shots = 0;
    for (const auto& r : records) {
        const QuerySample* anchor = &anchors.at(r.anchor_id);
        for (const auto& s : r.sequences) {
            if (s.icds.empty()) throw SchemaError("training data: empty ICD sequence for anchor " + std::to_string(r.anchor_id));
            if (shots == 0) shots = s.icds.size();
            if (s.icds.size() != shots) {
                throw SchemaError("training data mixes sequence lengths (" + std::to_string(shots) + " and " +
                                  std::to_string(s.icds.size()) + ")");
            }
            samples.push_back(TrainingSample{anchor, s.icds});
        }
    }
    return samples;
}

inline std::size_t total_train_steps(std::size_t samples, const TrainConfig& cfg) {
    if (samples == 0 || cfg.batch_size == 0) return 0;
    return cfg.epochs * ((samples + cfg.batch_size - 1) / cfg.batch_size);
}

// Trains in place. Each epoch visits the samples in a permutation seeded by
// (seed, epoch); step i uses lr_at(i, total).
inline TrainResult train(LeverLM& model, std::span<const ConstructionRecord> records, const ExampleIndex& anchors,
                         const TrainConfig& cfg, std::size_t threads = 1) {
    if (records.empty()) throw PreconditionError("train: empty dataset");
    if (cfg.batch_size == 0) throw ConfigError("training.batch_size must be positive");
    const auto samples = training_samples(records, anchors);
    const std::size_t total = total_train_steps(samples.size(), cfg);

    TrainResult result;
    result.state = TrainState::for_params(model.params, cfg.seed);
    std::vector<std::size_t> order(samples.size());
    std::vector<TrainingSample> batch;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(cfg.seed, {0x65706f63ULL, epoch}));
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            batch.clear();
            for (std::size_t k = start; k < end; ++k) batch.push_back(samples[order[k]]);
            const std::size_t step = result.state.step;
            const double lr = lr_at(step, total, cfg.lr, cfg.warmup_fraction);
            LossAndGrad lg = batch_gradients(model, batch, threads);
            if (!std::isfinite(lg.loss)) throw NumericError("train: non-finite loss at step " + std::to_string(step));
            optimizer_step(model.params, lg.grads,
                           result.state,
                           AdamWHyper{lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay});
            model.params.check_finite("train step " + std::to_string(step));
            result.state.best_loss = std::min(result.state.best_loss, lg.loss);
            result.history.push_back(LossRecord{step, lr, lg.loss});
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor) where a is analytic and n the
// central difference. The floor sits above the roundoff of a 1e-5 central
// difference on an O(1) loss (~1e-11 absolute).
inline constexpr double kGradCheckFloor = 1e-6;

// Compares analytic gradients of the mean batch loss against central
// differences over `coordinates` sampled trainable coordinates. Sampling
// cycles through the trainable tensors; within a tensor three of four picks
// come from coordinates with a non-zero analytic gradient.
inline GradCheckResult gradient_check(const LeverLM& model, std::span<const TrainingSample> batch,
                                      std::size_t coordinates, double step, std::uint64_t seed) {
    const LossAndGrad analytic = loss_and_gradients(model, batch);
    LeverLM probe = model;
    auto batch_loss = [&]() {
        double total = 0.0;
        for (const auto& s : batch) total += loss(probe, s);
        return total / static_cast<double>(batch.size());
    };
    std::vector<std::size_t> tensors;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        if (model.params[i].trainable) tensors.push_back(i);
    }
    GradCheckResult result;
    if (tensors.empty() || batch.empty()) return result;
    Rng rng(derive_seed(seed, {0x67636bULL}));
    for (std::size_t c = 0; c < coordinates; ++c) {
        const std::size_t ti = tensors[c % tensors.size()];
        const auto& g = analytic.grads[ti].tensor.data;
        std::vector<std::size_t> active;
        if (rng.uniform() < 0.75) {
            for (std::size_t k = 0; k < g.size(); ++k) {
                if (g[k] != 0.0) active.push_back(k);
            }
        }
        const std::size_t idx = active.empty() ? static_cast<std::size_t>(rng.uniform_index(g.size()))
                                               : active[static_cast<std::size_t>(rng.uniform_index(active.size()))];
        double& w = probe.params[ti].tensor.data[idx];
        const double saved = w;
        w = saved + step;
        const double plus = batch_loss();
        w = saved - step;
        const double minus = batch_loss();
        w = saved;
        const double numeric = (plus - minus) / (2.0 * step);
        const double a = g[idx];
        const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
        const double rel = std::abs(a - numeric) / denom;
        ++result.coordinates;
        if (rel > result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst_tensor = model.params[ti].name;
            result.worst_index = idx;
        }
    }
    return result;
}

}  // namespace leverlm
