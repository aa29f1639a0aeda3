#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "leverlm/core_types.hpp"
#include "leverlm/error.hpp"
#include "leverlm/nn_ops.hpp"
#include "leverlm/rng.hpp"
#include "leverlm/tensor.hpp"

namespace leverlm {

enum class Architecture { Transformer, LSTM };

// ImageOnly embeds just the query image (captioning analog); ImageText also
// adds the query's text features (question-answering analog).
enum class QueryMode { ImageOnly, ImageText };

inline std::string to_string(Architecture a) { return a == Architecture::Transformer ? "transformer" : "lstm"; }
inline std::string to_string(QueryMode m) { return m == QueryMode::ImageOnly ? "image" : "image_text"; }

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "transformer") return Architecture::Transformer;
    if (s == "lstm") return Architecture::LSTM;
    throw ConfigError("unknown architecture '" + s + "'");
}

inline QueryMode query_mode_from_string(const std::string& s) {
    if (s == "image") return QueryMode::ImageOnly;
    if (s == "image_text") return QueryMode::ImageText;
    throw ConfigError("unknown query mode '" + s + "'");
}

struct ModelConfig {
    Architecture arch = Architecture::Transformer;
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t ffn_multiplier = 4;
    bool adapter = true;
    bool encoder_trainable = false;  // whether the feature projection P is trained
    QueryMode query_mode = QueryMode::ImageOnly;
    std::size_t max_shots = 8;  // K_max

    std::size_t max_positions() const { return max_shots + 3; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate_model_config(const ModelConfig& c) {
    if (c.layers < 1) throw ConfigError("model.layers must be >= 1");
    if (c.d_model < 1) throw ConfigError("model.d_model must be >= 1");
    if (c.arch == Architecture::Transformer) {
        if (c.heads < 1 || c.d_model % c.heads != 0) {
            throw ConfigError("model.d_model must be divisible by model.heads");
        }
        if (c.ffn_multiplier < 1) throw ConfigError("model.ffn_multiplier must be >= 1");
    }
    if (c.max_shots < 1) throw ConfigError("model.max_shots must be >= 1");
}

// Example tokens occupy [0, N) in support-set id order; BOS = N, EOS = N+1,
// QUERY = N+2.
class Vocabulary {
public:
    Vocabulary() = default;

    explicit Vocabulary(std::vector<Example> support) : support_(std::move(support)) {
        std::sort(support_.begin(), support_.end(), [](const Example& a, const Example& b) { return a.id < b.id; });
        for (std::size_t i = 0; i < support_.size(); ++i) {
            if (!token_of_.emplace(support_[i].id, static_cast<int>(i)).second) {
                throw SchemaError("vocabulary: duplicate example id " + std::to_string(support_[i].id));
            }
        }
    }

    std::size_t num_examples() const { return support_.size(); }
    std::size_t size() const { return support_.size() + 3; }
    int bos() const { return static_cast<int>(support_.size()); }
    int eos() const { return static_cast<int>(support_.size()) + 1; }
    int query() const { return static_cast<int>(support_.size()) + 2; }
    bool is_example(int token) const { return token >= 0 && token < static_cast<int>(support_.size()); }

    int token_of(ExampleId id) const {
        auto it = token_of_.find(id);
        if (it == token_of_.end()) throw IndexError("example id " + std::to_string(id) + " not in vocabulary");
        return it->second;
    }

    const Example& example(int token) const {
        if (!is_example(token)) throw IndexError("token " + std::to_string(token) + " is not an example token");
        return support_[static_cast<std::size_t>(token)];
    }

    ExampleId id_of(int token) const { return example(token).id; }

    std::span<const Example> support() const { return support_; }

private:
    std::vector<Example> support_;
    std::unordered_map<ExampleId, int> token_of_;
};

struct LeverLM {
    ModelConfig config;
    Vocabulary vocab;
    std::size_t feature_dim = 0;
    ParamSet params;
};

namespace names {
inline const std::string kTokenEmbedding = "token_embedding";
inline const std::string kProjection = "feature_projection";
inline const std::string kAdapterW1 = "adapter.fc1.weight";
inline const std::string kAdapterB1 = "adapter.fc1.bias";
inline const std::string kAdapterW2 = "adapter.fc2.weight";
inline const std::string kAdapterB2 = "adapter.fc2.bias";
inline const std::string kPosition = "position_embedding";
inline const std::string kFinalGain = "final_ln.gain";
inline const std::string kFinalBias = "final_ln.bias";
inline const std::string kHead = "head.weight";

inline std::string block(std::size_t l, const char* leaf) { return "blocks." + std::to_string(l) + "." + leaf; }
inline std::string lstm(std::size_t l, const char* leaf) { return "lstm." + std::to_string(l) + "." + leaf; }
}  // namespace names

// Tensor names and shapes implied by a config; the checkpoint loader
// validates against this list. Keys carry no bias: it would shift every
// score in a softmax row equally and so has no effect.
inline ParamSet make_param_layout(const ModelConfig& c, std::size_t vocab_size, std::size_t feature_dim) {
    validate_model_config(c);
    const std::size_t d = c.d_model;
    const std::size_t f = feature_dim;
    ParamSet p;
    p.add(names::kTokenEmbedding, {vocab_size, d});
    p.add(names::kProjection, {d, f}, c.encoder_trainable);
    if (c.adapter) {
        p.add(names::kAdapterW1, {f, f});
        p.add(names::kAdapterB1, {f});
        p.add(names::kAdapterW2, {f, f});
        p.add(names::kAdapterB2, {f});
    }
    if (c.arch == Architecture::Transformer) {
        const std::size_t hidden = c.ffn_multiplier * d;
        p.add(names::kPosition, {c.max_positions(), d});
        for (std::size_t l = 0; l < c.layers; ++l) {
            p.add(names::block(l, "ln1.gain"), {d});
            p.add(names::block(l, "ln1.bias"), {d});
            p.add(names::block(l, "attn.query.weight"), {d, d});
            p.add(names::block(l, "attn.query.bias"), {d});
            p.add(names::block(l, "attn.key.weight"), {d, d});
            p.add(names::block(l, "attn.value.weight"), {d, d});
            p.add(names::block(l, "attn.value.bias"), {d});
            p.add(names::block(l, "attn.out.weight"), {d, d});
            p.add(names::block(l, "attn.out.bias"), {d});
            p.add(names::block(l, "ln2.gain"), {d});
            p.add(names::block(l, "ln2.bias"), {d});
            p.add(names::block(l, "ffn.fc1.weight"), {hidden, d});
            p.add(names::block(l, "ffn.fc1.bias"), {hidden});
            p.add(names::block(l, "ffn.fc2.weight"), {d, hidden});
            p.add(names::block(l, "ffn.fc2.bias"), {d});
        }
        p.add(names::kFinalGain, {d});
        p.add(names::kFinalBias, {d});
    } else {
        for (std::size_t l = 0; l < c.layers; ++l) {
            p.add(names::lstm(l, "input.weight"), {4 * d, d});
            p.add(names::lstm(l, "hidden.weight"), {4 * d, d});
            p.add(names::lstm(l, "bias"), {4 * d});
        }
    }
    p.add(names::kHead, {vocab_size, d});
    return p;
}

// Embedding tables and projections ~ N(0, 0.02^2); other matrices
// ~ N(0, 1/fan_in); biases zero; layer-norm gains one; LSTM forget bias one.
inline LeverLM init_lever_lm(const ModelConfig& config, Vocabulary vocab, std::size_t feature_dim, std::uint64_t seed) {
    LeverLM m;
    m.config = config;
    m.feature_dim = feature_dim;
    m.params = make_param_layout(config, vocab.size(), feature_dim);
    m.vocab = std::move(vocab);
    Rng rng(derive_seed(seed, {0x696e6974ULL}));
    const std::size_t d = config.d_model;
    for (auto& nt : m.params) {
        const std::string& n = nt.name;
        auto& data = nt.tensor.data;
        const auto& shape = nt.tensor.shape;
        auto ends_with = [&](const std::string& suffix) {
            return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (n == names::kTokenEmbedding || n == names::kPosition || n == names::kProjection || n == names::kHead) {
            for (double& v : data) v = 0.02 * rng.normal();
        } else if (ends_with("gain")) {
            std::fill(data.begin(), data.end(), 1.0);
        } else if (shape.size() == 2) {
            const double std_dev = 1.0 / std::sqrt(static_cast<double>(shape[1]));
            for (double& v : data) v = std_dev * rng.normal();
        } else if (n.rfind("lstm.", 0) == 0 && ends_with(".bias")) {
            std::fill(data.begin(), data.end(), 0.0);
            std::fill(data.begin() + static_cast<std::ptrdiff_t>(d), data.begin() + static_cast<std::ptrdiff_t>(2 * d),
                      1.0);
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct Logits {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    friend bool operator==(const Logits&, const Logits&) = default;
};

namespace detail {

struct FeatureUse {
    std::size_t position = 0;
    const std::vector<double>* feature = nullptr;
    std::vector<double> pre;      // adapter fc1 output
    std::vector<double> act;      // gelu(pre)
    std::vector<double> adapted;  // adapter output (or the raw feature)
};

struct BlockCache {
    std::vector<double> x_in, xhat1, rstd1, h1, q, k, v, att, ctx, x_mid, xhat2, rstd2, h2, f_pre, f_act;
};

struct LstmCache {
    std::vector<double> input, gates, cell, tanh_cell, hidden;  // gates: i, f, g, o activated
};

// Runs the model on one token row and keeps what backward needs.
class ForwardPass {
public:
    ForwardPass(const LeverLM& model, std::span<const int> row, const QuerySample& query, QueryMode mode)
        : m_(model), row_(row.begin(), row.end()), query_(query), mode_(mode) {
        run();
    }

    const Logits& logits() const { return logits_; }

    // Accumulates into grads (same layout as params) given dL/dlogits.
    void backward(std::span<const double> dlogits, ParamSet& grads) const;

private:
    void run();
    void embed();
    void run_transformer();
    void run_lstm();
    void add_feature(std::size_t pos, const std::vector<double>& feat);

    const LeverLM& m_;
    std::vector<int> row_;
    const QuerySample& query_;
    QueryMode mode_;
    std::size_t len_ = 0;

    std::vector<FeatureUse> features_;
    std::vector<double> x0_;  // embeddings (+ positions for the transformer)
    std::vector<BlockCache> blocks_;
    std::vector<LstmCache> lstm_;
    std::vector<double> top_;  // input to the head after the final norm (or the LSTM top hidden)
    std::vector<double> final_in_, final_xhat_, final_rstd_;
    Logits logits_;
};

inline void ForwardPass::add_feature(std::size_t pos, const std::vector<double>& feat) {
    const std::size_t f = m_.feature_dim;
    const std::size_t d = m_.config.d_model;
    if (feat.size() != f) {
        throw SchemaError("feature length " + std::to_string(feat.size()) + " does not match model feature_dim " +
                          std::to_string(f));
    }
    FeatureUse use;
    use.position = pos;
    use.feature = &feat;
    if (m_.config.adapter) {
        const auto& w1 = m_.params.get(names::kAdapterW1);
        const auto& b1 = m_.params.get(names::kAdapterB1);
        const auto& w2 = m_.params.get(names::kAdapterW2);
        const auto& b2 = m_.params.get(names::kAdapterB2);
        use.pre.assign(f, 0.0);
        use.act.assign(f, 0.0);
        use.adapted.assign(f, 0.0);
        nn::linear_forward(feat.data(), 1, f, w1.ptr(), b1.ptr(), f, use.pre.data());
        for (std::size_t i = 0; i < f; ++i) use.act[i] = nn::gelu(use.pre[i]);
        nn::linear_forward(use.act.data(), 1, f, w2.ptr(), b2.ptr(), f, use.adapted.data());
    } else {
        use.adapted = feat;
    }
    const auto& proj = m_.params.get(names::kProjection);
    std::vector<double> projected(d);
    nn::linear_forward(use.adapted.data(), 1, f, proj.ptr(), nullptr, d, projected.data());
    for (std::size_t i = 0; i < d; ++i) x0_[pos * d + i] += projected[i];
    features_.push_back(std::move(use));
}

inline void ForwardPass::embed() {
    const std::size_t d = m_.config.d_model;
    const auto& vocab = m_.vocab;
    const auto& table = m_.params.get(names::kTokenEmbedding);
    x0_.assign(len_ * d, 0.0);
    for (std::size_t p = 0; p < len_; ++p) {
        const int tok = row_[p];
        if (tok < 0 || static_cast<std::size_t>(tok) >= vocab.size()) {
            throw IndexError("token id " + std::to_string(tok) + " outside vocabulary of size " +
                             std::to_string(vocab.size()));
        }
        std::copy_n(table.ptr() + static_cast<std::size_t>(tok) * d, d, x0_.data() + p * d);
        if (tok == vocab.query()) {
            add_feature(p, query_.img_feat);
            if (mode_ == QueryMode::ImageText) {
                if (!query_.txt_feat) {
                    throw CapabilityError("query " + std::to_string(query_.id) +
                                          " has no txt_feat but the query mode embeds text");
                }
                add_feature(p, *query_.txt_feat);
            }
        } else if (vocab.is_example(tok)) {
            const Example& e = vocab.example(tok);
            add_feature(p, e.img_feat);
            if (e.txt_feat) add_feature(p, *e.txt_feat);
        }
    }
}

inline void ForwardPass::run() {
    len_ = row_.size();
    if (len_ == 0) throw LengthError("empty input row");
    if (len_ > m_.config.max_positions()) {
        throw LengthError("input row of length " + std::to_string(len_) + " exceeds the maximum of " +
                          std::to_string(m_.config.max_positions()));
    }
    embed();
    if (m_.config.arch == Architecture::Transformer) {
        run_transformer();
    } else {
        run_lstm();
    }
    const std::size_t d = m_.config.d_model;
    const std::size_t vsize = m_.vocab.size();
    logits_.rows = len_;
    logits_.cols = vsize;
    logits_.data.assign(len_ * vsize, 0.0);
    nn::linear_forward(top_.data(), len_, d, m_.params.get(names::kHead).ptr(), nullptr, vsize, logits_.data.data());
}

inline void ForwardPass::run_transformer() {
    const std::size_t d = m_.config.d_model;
    const std::size_t heads = m_.config.heads;
    const std::size_t dh = d / heads;
    const std::size_t hidden = m_.config.ffn_multiplier * d;
    const std::size_t n = len_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& pos = m_.params.get(names::kPosition);
    for (std::size_t i = 0; i < n * d; ++i) x0_[i] += pos.data[i];

    std::vector<double> x = x0_;
    blocks_.resize(m_.config.layers);
    for (std::size_t l = 0; l < m_.config.layers; ++l) {
        BlockCache& c = blocks_[l];
        const auto& P = m_.params;
        c.x_in = x;
        c.xhat1.assign(n * d, 0.0);
        c.rstd1.assign(n, 0.0);
        c.h1.assign(n * d, 0.0);
        nn::layer_norm_forward(x.data(), n, d, P.get(names::block(l, "ln1.gain")).ptr(),
                               P.get(names::block(l, "ln1.bias")).ptr(), c.xhat1.data(), c.rstd1.data(), c.h1.data());
        c.q.assign(n * d, 0.0);
        c.k.assign(n * d, 0.0);
        c.v.assign(n * d, 0.0);
        nn::linear_forward(c.h1.data(), n, d, P.get(names::block(l, "attn.query.weight")).ptr(),
                           P.get(names::block(l, "attn.query.bias")).ptr(), d, c.q.data());
        nn::linear_forward(c.h1.data(), n, d, P.get(names::block(l, "attn.key.weight")).ptr(),
                           nullptr, d, c.k.data());
        nn::linear_forward(c.h1.data(), n, d, P.get(names::block(l, "attn.value.weight")).ptr(),
                           P.get(names::block(l, "attn.value.bias")).ptr(), d, c.v.data());
        // att[h][i][j], causal (j <= i)
        c.att.assign(heads * n * n, 0.0);
        c.ctx.assign(n * d, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                double* a = c.att.data() + (h * n + i) * n;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += c.q[i * d + h * dh + e] * c.k[j * d + h * dh + e];
                    a[j] = s * scale;
                    mx = std::max(mx, a[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    a[j] = std::exp(a[j] - mx);
                    sum += a[j];
                }
                for (std::size_t j = 0; j <= i; ++j) a[j] /= sum;
                for (std::size_t j = 0; j <= i; ++j) {
                    for (std::size_t e = 0; e < dh; ++e) c.ctx[i * d + h * dh + e] += a[j] * c.v[j * d + h * dh + e];
                }
            }
        }
        std::vector<double> o(n * d, 0.0);
        nn::linear_forward(c.ctx.data(), n, d, P.get(names::block(l, "attn.out.weight")).ptr(),
                           P.get(names::block(l, "attn.out.bias")).ptr(), d, o.data());
        c.x_mid.assign(n * d, 0.0);
        for (std::size_t i = 0; i < n * d; ++i) c.x_mid[i] = x[i] + o[i];

        c.xhat2.assign(n * d, 0.0);
        c.rstd2.assign(n, 0.0);
        c.h2.assign(n * d, 0.0);
        nn::layer_norm_forward(c.x_mid.data(), n, d, P.get(names::block(l, "ln2.gain")).ptr(),
                               P.get(names::block(l, "ln2.bias")).ptr(), c.xhat2.data(), c.rstd2.data(), c.h2.data());
        c.f_pre.assign(n * hidden, 0.0);
        nn::linear_forward(c.h2.data(), n, d, P.get(names::block(l, "ffn.fc1.weight")).ptr(),
                           P.get(names::block(l, "ffn.fc1.bias")).ptr(), hidden, c.f_pre.data());
        c.f_act.assign(n * hidden, 0.0);
        for (std::size_t i = 0; i < n * hidden; ++i) c.f_act[i] = nn::gelu(c.f_pre[i]);
        std::vector<double> f2(n * d, 0.0);
        nn::linear_forward(c.f_act.data(), n, hidden, P.get(names::block(l, "ffn.fc2.weight")).ptr(),
                           P.get(names::block(l, "ffn.fc2.bias")).ptr(), d, f2.data());
        for (std::size_t i = 0; i < n * d; ++i) x[i] = c.x_mid[i] + f2[i];
    }
    final_in_ = x;
    final_xhat_.assign(n * d, 0.0);
    final_rstd_.assign(n, 0.0);
    top_.assign(n * d, 0.0);
    nn::layer_norm_forward(final_in_.data(), n, d, m_.params.get(names::kFinalGain).ptr(),
                           m_.params.get(names::kFinalBias).ptr(), final_xhat_.data(), final_rstd_.data(), top_.data());
}

inline void ForwardPass::run_lstm() {
    const std::size_t d = m_.config.d_model;
    const std::size_t n = len_;
    std::vector<double> input = x0_;
    lstm_.resize(m_.config.layers);
    std::vector<double> z(4 * d);
    for (std::size_t l = 0; l < m_.config.layers; ++l) {
        LstmCache& c = lstm_[l];
        const auto& wx = m_.params.get(names::lstm(l, "input.weight"));
        const auto& wh = m_.params.get(names::lstm(l, "hidden.weight"));
        const auto& b = m_.params.get(names::lstm(l, "bias"));
        c.input = input;
        c.gates.assign(n * 4 * d, 0.0);
        c.cell.assign(n * d, 0.0);
        c.tanh_cell.assign(n * d, 0.0);
        c.hidden.assign(n * d, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            nn::linear_forward(input.data() + t * d, 1, d, wx.ptr(), b.ptr(), 4 * d, z.data());
            if (t > 0) {
                std::vector<double> zh(4 * d, 0.0);
                nn::linear_forward(c.hidden.data() + (t - 1) * d, 1, d, wh.ptr(), nullptr, 4 * d, zh.data());
                for (std::size_t i = 0; i < 4 * d; ++i) z[i] += zh[i];
            }
            double* g = c.gates.data() + t * 4 * d;
            for (std::size_t i = 0; i < d; ++i) {
                g[i] = nn::sigmoid(z[i]);
                g[d + i] = nn::sigmoid(z[d + i]);
                g[2 * d + i] = std::tanh(z[2 * d + i]);
                g[3 * d + i] = nn::sigmoid(z[3 * d + i]);
                const double prev = t > 0 ? c.cell[(t - 1) * d + i] : 0.0;
                const double cell = g[d + i] * prev + g[i] * g[2 * d + i];
                c.cell[t * d + i] = cell;
                c.tanh_cell[t * d + i] = std::tanh(cell);
                c.hidden[t * d + i] = g[3 * d + i] * c.tanh_cell[t * d + i];
            }
        }
        input = c.hidden;
    }
    top_ = input;
}

inline void ForwardPass::backward(std::span<const double> dlogits, ParamSet& grads) const {
    const std::size_t d = m_.config.d_model;
    const std::size_t n = len_;
    const std::size_t vsize = m_.vocab.size();
    const auto& P = m_.params;

    std::vector<double> dtop(n * d, 0.0);
    nn::linear_backward(top_.data(), dlogits.data(), n, d, vsize, P.get(names::kHead).ptr(), dtop.data(),
                        grads.get(names::kHead).ptr(), nullptr);

    std::vector<double> dx0(n * d, 0.0);
    if (m_.config.arch == Architecture::Transformer) {
        const std::size_t heads = m_.config.heads;
        const std::size_t dh = d / heads;
        const std::size_t hidden = m_.config.ffn_multiplier * d;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

        std::vector<double> dx(n * d, 0.0);
        nn::layer_norm_backward(dtop.data(), final_xhat_.data(), final_rstd_.data(), n, d, P.get(names::kFinalGain).ptr(),
                                dx.data(), grads.get(names::kFinalGain).ptr(), grads.get(names::kFinalBias).ptr());
        for (std::size_t l = m_.config.layers; l-- > 0;) {
            const BlockCache& c = blocks_[l];
            auto g = [&](const char* leaf) { return grads.get(names::block(l, leaf)).ptr(); };
            auto w = [&](const char* leaf) { return P.get(names::block(l, leaf)).ptr(); };

            // feed-forward sublayer: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
            std::vector<double> dmid = dx;
            std::vector<double> dact(n * hidden, 0.0);
            nn::linear_backward(c.f_act.data(), dx.data(), n, hidden, d, w("ffn.fc2.weight"), dact.data(),
                                g("ffn.fc2.weight"), g("ffn.fc2.bias"));
            for (std::size_t i = 0; i < n * hidden; ++i) dact[i] *= nn::gelu_grad(c.f_pre[i]);
            std::vector<double> dh2(n * d, 0.0);
            nn::linear_backward(c.h2.data(), dact.data(), n, d, hidden, w("ffn.fc1.weight"), dh2.data(),
                                g("ffn.fc1.weight"), g("ffn.fc1.bias"));
            nn::layer_norm_backward(dh2.data(), c.xhat2.data(), c.rstd2.data(), n, d, w("ln2.gain"), dmid.data(),
                                    g("ln2.gain"), g("ln2.bias"));

            // attention sublayer: x_mid = x_in + out(attn(ln1(x_in)))
            std::vector<double> din = dmid;
            std::vector<double> dctx(n * d, 0.0);
            nn::linear_backward(c.ctx.data(), dmid.data(), n, d, d, w("attn.out.weight"), dctx.data(),
                                g("attn.out.weight"), g("attn.out.bias"));
            std::vector<double> dq(n * d, 0.0), dk(n * d, 0.0), dv(n * d, 0.0);
            std::vector<double> da(n);
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t i = 0; i < n; ++i) {
                    const double* a = c.att.data() + (h * n + i) * n;
                    const double* dci = dctx.data() + i * d + h * dh;
                    double dot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double s = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            s += dci[e] * c.v[j * d + h * dh + e];
                            dv[j * d + h * dh + e] += a[j] * dci[e];
                        }
                        da[j] = s;
                        dot += a[j] * s;
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = a[j] * (da[j] - dot) * scale;
                        if (ds == 0.0) continue;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dq[i * d + h * dh + e] += ds * c.k[j * d + h * dh + e];
                            dk[j * d + h * dh + e] += ds * c.q[i * d + h * dh + e];
                        }
                    }
                }
            }
            std::vector<double> dh1(n * d, 0.0);
            nn::linear_backward(c.h1.data(), dq.data(), n, d, d, w("attn.query.weight"), dh1.data(),
                                g("attn.query.weight"), g("attn.query.bias"));
            nn::linear_backward(c.h1.data(), dk.data(), n, d, d, w("attn.key.weight"), dh1.data(),
                                g("attn.key.weight"), nullptr);
            nn::linear_backward(c.h1.data(), dv.data(), n, d, d, w("attn.value.weight"), dh1.data(),
                                g("attn.value.weight"), g("attn.value.bias"));
            nn::layer_norm_backward(dh1.data(), c.xhat1.data(), c.rstd1.data(), n, d, w("ln1.gain"), din.data(),
                                    g("ln1.gain"), g("ln1.bias"));
            dx = std::move(din);
        }
        dx0 = dx;
        double* dpos = grads.get(names::kPosition).ptr();
        for (std::size_t i = 0; i < n * d; ++i) dpos[i] += dx0[i];
    } else {
        std::vector<double> dout = dtop;  // gradient w.r.t. the hidden states of the current layer
        for (std::size_t l = m_.config.layers; l-- > 0;) {
            const LstmCache& c = lstm_[l];
            const double* wx = P.get(names::lstm(l, "input.weight")).ptr();
            const double* wh = P.get(names::lstm(l, "hidden.weight")).ptr();
            double* gwx = grads.get(names::lstm(l, "input.weight")).ptr();
            double* gwh = grads.get(names::lstm(l, "hidden.weight")).ptr();
            double* gb = grads.get(names::lstm(l, "bias")).ptr();
            std::vector<double> dinput(n * d, 0.0);
            std::vector<double> dh_next(d, 0.0), dc_next(d, 0.0), dz(4 * d);
            for (std::size_t t = n; t-- > 0;) {
                const double* gt = c.gates.data() + t * 4 * d;
                for (std::size_t i = 0; i < d; ++i) {
                    const double dh = dout[t * d + i] + dh_next[i];
                    const double ig = gt[i], fg = gt[d + i], gg = gt[2 * d + i], og = gt[3 * d + i];
                    const double tc = c.tanh_cell[t * d + i];
                    const double dc = dh * og * (1.0 - tc * tc) + dc_next[i];
                    const double prev = t > 0 ? c.cell[(t - 1) * d + i] : 0.0;
                    dz[i] = dc * gg * ig * (1.0 - ig);
                    dz[d + i] = dc * prev * fg * (1.0 - fg);
                    dz[2 * d + i] = dc * ig * (1.0 - gg * gg);
                    dz[3 * d + i] = dh * tc * og * (1.0 - og);
                    dc_next[i] = dc * fg;
                }
                nn::linear_backward(c.input.data() + t * d, dz.data(), 1, d, 4 * d, wx, dinput.data() + t * d, gwx, gb);
                std::fill(dh_next.begin(), dh_next.end(), 0.0);
                if (t > 0) {
                    nn::linear_backward(c.hidden.data() + (t - 1) * d, dz.data(), 1, d, 4 * d, wh, dh_next.data(),
                                        gwh, nullptr);
                }
            }
            dout = std::move(dinput);
        }
        dx0 = std::move(dout);
    }

    // embeddings: token table rows plus projected (adapted) features
    double* gtable = grads.get(names::kTokenEmbedding).ptr();
    for (std::size_t p = 0; p < n; ++p) {
        double* row = gtable + static_cast<std::size_t>(row_[p]) * d;
        for (std::size_t i = 0; i < d; ++i) row[i] += dx0[p * d + i];
    }
    if (features_.empty()) return;
    const std::size_t f = m_.feature_dim;
    const bool projection_trainable = P.is_trainable(names::kProjection);
    const auto& proj = P.get(names::kProjection);
    double* gproj = projection_trainable ? grads.get(names::kProjection).ptr() : nullptr;
    const bool adapter_trainable = m_.config.adapter && P.is_trainable(names::kAdapterW1);
    std::vector<double> dadapted(f);
    for (const FeatureUse& use : features_) {
        std::fill(dadapted.begin(), dadapted.end(), 0.0);
        nn::linear_backward(use.adapted.data(), dx0.data() + use.position * d, 1, f, d, proj.ptr(),
                            adapter_trainable ? dadapted.data() : nullptr, gproj, nullptr);
        if (!adapter_trainable) continue;
        std::vector<double> dact(f, 0.0);
        nn::linear_backward(use.act.data(), dadapted.data(), 1, f, f, P.get(names::kAdapterW2).ptr(), dact.data(),
                            grads.get(names::kAdapterW2).ptr(), grads.get(names::kAdapterB2).ptr());
        for (std::size_t i = 0; i < f; ++i) dact[i] *= nn::gelu_grad(use.pre[i]);
        nn::linear_backward(use.feature->data(), dact.data(), 1, f, f, P.get(names::kAdapterW1).ptr(), nullptr,
                            grads.get(names::kAdapterW1).ptr(), grads.get(names::kAdapterB1).ptr());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public operations

// P(adapter(feature)), or P(feature) when the adapter is disabled.
inline std::vector<double> project_feature(const LeverLM& model, std::span<const double> feat) {
    const std::size_t f = model.feature_dim;
    const std::size_t d = model.config.d_model;
    if (feat.size() != f) {
        throw SchemaError("feature length " + std::to_string(feat.size()) + " does not match model feature_dim " +
                          std::to_string(f));
    }
    std::vector<double> adapted(feat.begin(), feat.end());
    if (model.config.adapter) {
        std::vector<double> pre(f), act(f);
        nn::linear_forward(feat.data(), 1, f, model.params.get(names::kAdapterW1).ptr(),
                           model.params.get(names::kAdapterB1).ptr(), f, pre.data());
        for (std::size_t i = 0; i < f; ++i) act[i] = nn::gelu(pre[i]);
        nn::linear_forward(act.data(), 1, f, model.params.get(names::kAdapterW2).ptr(),
                           model.params.get(names::kAdapterB2).ptr(), f, adapted.data());
    }
    std::vector<double> out(d);
    nn::linear_forward(adapted.data(), 1, f, model.params.get(names::kProjection).ptr(), nullptr, d, out.data());
    return out;
}

namespace detail {
inline std::vector<double> table_row(const LeverLM& model, int token) {
    const std::size_t d = model.config.d_model;
    if (token < 0 || static_cast<std::size_t>(token) >= model.vocab.size()) {
        throw IndexError("token id " + std::to_string(token) + " outside vocabulary of size " +
                         std::to_string(model.vocab.size()));
    }
    const double* row = model.params.get(names::kTokenEmbedding).ptr() + static_cast<std::size_t>(token) * d;
    return {row, row + d};
}

inline void add_into(std::vector<double>& acc, const std::vector<double>& term) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += term[i];
}
}  // namespace detail

// e = r[token] + P(adapter(img)) + P(adapter(txt)) for example tokens (the
// text term only when the example has text); special tokens embed as r alone.
inline std::vector<double> embed_token(const LeverLM& model, int token) {
    std::vector<double> e = detail::table_row(model, token);
    if (!model.vocab.is_example(token)) return e;
    const Example& ex = model.vocab.example(token);
    detail::add_into(e, project_feature(model, ex.img_feat));
    if (ex.txt_feat) detail::add_into(e, project_feature(model, *ex.txt_feat));
    return e;
}

// r[QUERY] + P(adapter(img)), plus the text term in ImageText mode.
inline std::vector<double> embed_query(const LeverLM& model, const QuerySample& query, QueryMode mode) {
    std::vector<double> e = detail::table_row(model, model.vocab.query());
    detail::add_into(e, project_feature(model, query.img_feat));
    if (mode == QueryMode::ImageText) {
        if (!query.txt_feat) {
            throw CapabilityError("query " + std::to_string(query.id) + " has no txt_feat but the query mode embeds text");
        }
        detail::add_into(e, project_feature(model, *query.txt_feat));
    }
    return e;
}

// Logits (positions x V) under a causal mask. The QUERY token position
// carries the query's features.
inline Logits forward(const LeverLM& model, std::span<const int> row, const QuerySample& query, QueryMode mode) {
    return detail::ForwardPass(model, row, query, mode).logits();
}

inline Logits forward(const LeverLM& model, std::span<const int> row, const QuerySample& query) {
    return forward(model, row, query, model.config.query_mode);
}

// Runs the model one position at a time, keeping per-layer keys and values
// (LSTM: hidden and cell). Each step performs the same arithmetic as the
// matching row of forward(), so the logits agree bit for bit. Copyable, which
// lets beam hypotheses branch.
class IncrementalDecoder {
public:
    explicit IncrementalDecoder(const LeverLM& model) : m_(&model), layers_(model.config.layers) {}

    std::size_t length() const { return len_; }

    // Appends a position with the given input embedding (embed_token or
    // embed_query) and returns its logits.
    std::vector<double> step(std::span<const double> embedding);

private:
    struct Layer {
        std::vector<double> k, v;        // transformer: one row per position
        std::vector<double> hidden, cell;  // LSTM: latest state
    };
    void transformer_step(std::vector<double>& x);
    void lstm_step(std::vector<double>& x);

    const LeverLM* m_;
    std::vector<Layer> layers_;
    std::size_t len_ = 0;
};

inline std::vector<double> IncrementalDecoder::step(std::span<const double> embedding) {
    const std::size_t d = m_->config.d_model;
    if (embedding.size() != d) throw SchemaError("embedding length does not match d_model");
    if (len_ + 1 > m_->config.max_positions()) {
        throw LengthError("input row of length " + std::to_string(len_ + 1) + " exceeds the maximum of " +
                          std::to_string(m_->config.max_positions()));
    }
    std::vector<double> x(embedding.begin(), embedding.end());
    if (m_->config.arch == Architecture::Transformer) {
        transformer_step(x);
    } else {
        lstm_step(x);
    }
    ++len_;
    const std::size_t vsize = m_->vocab.size();
    std::vector<double> logits(vsize, 0.0);
    nn::linear_forward(x.data(), 1, d, m_->params.get(names::kHead).ptr(), nullptr, vsize, logits.data());
    return logits;
}

inline void IncrementalDecoder::transformer_step(std::vector<double>& x) {
    const std::size_t d = m_->config.d_model;
    const std::size_t heads = m_->config.heads;
    const std::size_t dh = d / heads;
    const std::size_t hidden = m_->config.ffn_multiplier * d;
    const std::size_t p = len_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& P = m_->params;
    const auto& pos = P.get(names::kPosition);
    for (std::size_t i = 0; i < d; ++i) x[i] += pos.data[p * d + i];

    double rstd = 0.0;
    std::vector<double> xhat(d), h(d), q(d), o(d), ctx(d), x_mid(d), f(hidden), f2(d), att(p + 1);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        Layer& c = layers_[l];
        nn::layer_norm_forward(x.data(), 1, d, P.get(names::block(l, "ln1.gain")).ptr(),
                               P.get(names::block(l, "ln1.bias")).ptr(), xhat.data(), &rstd, h.data());
        c.k.resize((p + 1) * d);
        c.v.resize((p + 1) * d);
        nn::linear_forward(h.data(), 1, d, P.get(names::block(l, "attn.query.weight")).ptr(),
                           P.get(names::block(l, "attn.query.bias")).ptr(), d, q.data());
        nn::linear_forward(h.data(), 1, d, P.get(names::block(l, "attn.key.weight")).ptr(), nullptr, d,
                           c.k.data() + p * d);
        nn::linear_forward(h.data(), 1, d, P.get(names::block(l, "attn.value.weight")).ptr(),
                           P.get(names::block(l, "attn.value.bias")).ptr(), d, c.v.data() + p * d);
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= p; ++j) {
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += q[hd * dh + e] * c.k[j * d + hd * dh + e];
                att[j] = s * scale;
                mx = std::max(mx, att[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= p; ++j) {
                att[j] = std::exp(att[j] - mx);
                sum += att[j];
            }
            for (std::size_t j = 0; j <= p; ++j) att[j] /= sum;
            for (std::size_t j = 0; j <= p; ++j) {
                for (std::size_t e = 0; e < dh; ++e) ctx[hd * dh + e] += att[j] * c.v[j * d + hd * dh + e];
            }
        }
        nn::linear_forward(ctx.data(), 1, d, P.get(names::block(l, "attn.out.weight")).ptr(),
                           P.get(names::block(l, "attn.out.bias")).ptr(), d, o.data());
        for (std::size_t i = 0; i < d; ++i) x_mid[i] = x[i] + o[i];
        nn::layer_norm_forward(x_mid.data(), 1, d, P.get(names::block(l, "ln2.gain")).ptr(),
                               P.get(names::block(l, "ln2.bias")).ptr(), xhat.data(), &rstd, h.data());
        nn::linear_forward(h.data(), 1, d, P.get(names::block(l, "ffn.fc1.weight")).ptr(),
                           P.get(names::block(l, "ffn.fc1.bias")).ptr(), hidden, f.data());
        for (double& v : f) v = nn::gelu(v);
        nn::linear_forward(f.data(), 1, hidden, P.get(names::block(l, "ffn.fc2.weight")).ptr(),
                           P.get(names::block(l, "ffn.fc2.bias")).ptr(), d, f2.data());
        for (std::size_t i = 0; i < d; ++i) x[i] = x_mid[i] + f2[i];
    }
    std::vector<double> top(d);
    nn::layer_norm_forward(x.data(), 1, d, P.get(names::kFinalGain).ptr(), P.get(names::kFinalBias).ptr(),
                           xhat.data(), &rstd, top.data());
    x = std::move(top);
}

inline void IncrementalDecoder::lstm_step(std::vector<double>& x) {
    const std::size_t d = m_->config.d_model;
    const bool first = len_ == 0;
    std::vector<double> z(4 * d), zh(4 * d);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        Layer& c = layers_[l];
        nn::linear_forward(x.data(), 1, d, m_->params.get(names::lstm(l, "input.weight")).ptr(),
                           m_->params.get(names::lstm(l, "bias")).ptr(), 4 * d, z.data());
        if (!first) {
            nn::linear_forward(c.hidden.data(), 1, d, m_->params.get(names::lstm(l, "hidden.weight")).ptr(), nullptr,
                               4 * d, zh.data());
            for (std::size_t i = 0; i < 4 * d; ++i) z[i] += zh[i];
        }
        c.hidden.resize(d);
        c.cell.resize(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double gi = nn::sigmoid(z[i]);
            const double gf = nn::sigmoid(z[d + i]);
            const double gg = std::tanh(z[2 * d + i]);
            const double go = nn::sigmoid(z[3 * d + i]);
            const double prev = first ? 0.0 : c.cell[i];
            const double cell = gf * prev + gi * gg;
            c.cell[i] = cell;
            c.hidden[i] = go * std::tanh(cell);
        }
        x = c.hidden;
    }
}

// [BOS, QUERY, d_1, ..., d_K] as input; targets d_1..d_K, EOS at positions 1..K+1.
inline std::vector<int> training_row(const Vocabulary& vocab, std::span<const ExampleId> icds) {
    std::vector<int> row{vocab.bos(), vocab.query()};
    for (ExampleId id : icds) row.push_back(vocab.token_of(id));
    return row;
}

inline std::vector<int> training_targets(const Vocabulary& vocab, std::span<const ExampleId> icds) {
    std::vector<int> targets;
    for (ExampleId id : icds) targets.push_back(vocab.token_of(id));
    targets.push_back(vocab.eos());
    return targets;
}

// One (query, ICD sequence) pair from the constructed dataset.
struct TrainingSample {
    const QuerySample* query = nullptr;
    std::vector<ExampleId> icds;
};

namespace detail {

// log-softmax of a row evaluated at `target`, plus the softmax row.
inline double cross_entropy_row(std::span<const double> logits, int target, std::vector<double>* probs) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double log_z = mx + std::log(sum);
    if (probs != nullptr) {
        probs->resize(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) (*probs)[i] = std::exp(logits[i] - log_z);
    }
    return log_z - logits[static_cast<std::size_t>(target)];
}

}  // namespace detail

// Mean cross-entropy over the K+1 targets (nothing is predicted at BOS).
inline double loss(const LeverLM& model, const TrainingSample& sample) {
    if (sample.icds.empty()) throw PreconditionError("loss: empty ICD sequence");
    const auto row = training_row(model.vocab, sample.icds);
    const auto targets = training_targets(model.vocab, sample.icds);
    const Logits lg = forward(model, row, *sample.query);
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        total += detail::cross_entropy_row(lg.row(t + 1), targets[t], nullptr);
    }
    return total / static_cast<double>(targets.size());
}

// Adds scale * dLoss/dparams into grads and returns the sample loss. Frozen
// tensors are never written.
inline double accumulate_gradients(const LeverLM& model, const TrainingSample& sample, ParamSet& grads,
                                   double scale = 1.0) {
    if (sample.icds.empty()) throw PreconditionError("loss: empty ICD sequence");
    const auto row = training_row(model.vocab, sample.icds);
    const auto targets = training_targets(model.vocab, sample.icds);
    const detail::ForwardPass pass(model, row, *sample.query, model.config.query_mode);
    const Logits& lg = pass.logits();
    std::vector<double> dlogits(lg.data.size(), 0.0);
    std::vector<double> probs;
    double total = 0.0;
    const double per_target = scale / static_cast<double>(targets.size());
    for (std::size_t t = 0; t < targets.size(); ++t) {
        total += detail::cross_entropy_row(lg.row(t + 1), targets[t], &probs);
        double* drow = dlogits.data() + (t + 1) * lg.cols;
        for (std::size_t v = 0; v < lg.cols; ++v) drow[v] = per_target * probs[v];
        drow[static_cast<std::size_t>(targets[t])] -= per_target;
    }
    const double value = total / static_cast<double>(targets.size());
    if (!std::isfinite(value)) throw NumericError("loss: non-finite loss value");
    pass.backward(dlogits, grads);
    return value;
}

struct LossAndGrad {
    double loss = 0.0;
    ParamSet grads;
};

// Mean loss and gradient over a batch. Samples are processed in index order,
// so the reduction order is fixed. An empty batch yields zero gradients.
inline LossAndGrad loss_and_gradients(const LeverLM& model, std::span<const TrainingSample> batch) {
    LossAndGrad out{0.0, model.params.zeros_like()};
    if (batch.empty()) return out;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const auto& s : batch) {
        out.loss += scale * accumulate_gradients(model, s, out.grads, scale);
    }
    out.grads.check_finite("backward");
    return out;
}

}  // namespace leverlm
