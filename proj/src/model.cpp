#include "specee/model.hpp"

#include "specee/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace specee {

namespace {

constexpr float kNormEps = 1e-5f;

void require(bool ok, const std::string& msg)
{
    if (!ok)
        throw std::invalid_argument(msg);
}

// out = x * W with W stored input-major (rows = len(x)). Each output
// accumulates over i in increasing order; the j loop vectorizes without
// changing that order.
void matvec(std::span<const float> x, const Tensor& w, std::span<float> out)
{
    const std::size_t cols = w.cols();
    std::fill(out.begin(), out.end(), 0.0f);
    const float* wd = w.data.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float xi = x[i];
        const float* row = wd + i * cols;
        for (std::size_t j = 0; j < cols; ++j)
            out[j] += xi * row[j];
    }
}

void layer_norm(std::span<const float> x, const Tensor& gain, const Tensor& bias, std::span<float> out)
{
    const std::size_t n = x.size();
    float mean = 0.0f;
    for (float v : x)
        mean += v;
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (float v : x)
        var += (v - mean) * (v - mean);
    var /= static_cast<float>(n);
    const float rstd = 1.0f / std::sqrt(var + kNormEps);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (x[i] - mean) * rstd * gain.data[i] + bias.data[i];
}

}  // namespace

void ModelConfig::validate() const
{
    require(vocab_size >= 2, "vocab_size must be >= 2");
    require(hidden_dim >= 1, "hidden_dim must be >= 1");
    require(num_layers >= 1, "num_layers must be >= 1");
    require(num_heads >= 1, "num_heads must be >= 1");
    require(hidden_dim % num_heads == 0, "hidden_dim must be divisible by num_heads");
    require(ffn_dim >= 1, "ffn_dim must be >= 1");
    require(max_context >= 1, "max_context must be >= 1");
}

Tensor::Tensor(std::string n, std::vector<std::uint32_t> s) : name(std::move(n)), shape(std::move(s))
{
    std::size_t count = 1;
    for (auto d : shape)
        count *= d;
    data.assign(count, 0.0f);
}

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config)
{
    config.validate();
    const std::uint32_t v = config.vocab_size, d = config.hidden_dim, f = config.ffn_dim;
    embedding = Tensor("embedding", {v, d});
    layers.reserve(config.num_layers);
    for (std::uint32_t l = 0; l < config.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights lw;
        lw.attn_norm_gain = Tensor(p + "attn_norm.gain", {d});
        lw.attn_norm_bias = Tensor(p + "attn_norm.bias", {d});
        lw.wq = Tensor(p + "attn.wq", {d, d});
        lw.wk = Tensor(p + "attn.wk", {d, d});
        lw.wv = Tensor(p + "attn.wv", {d, d});
        lw.wo = Tensor(p + "attn.wo", {d, d});
        lw.ffn_norm_gain = Tensor(p + "ffn_norm.gain", {d});
        lw.ffn_norm_bias = Tensor(p + "ffn_norm.bias", {d});
        lw.w_up = Tensor(p + "ffn.w_up", {d, f});
        lw.b_up = Tensor(p + "ffn.b_up", {f});
        lw.w_down = Tensor(p + "ffn.w_down", {f, d});
        lw.b_down = Tensor(p + "ffn.b_down", {d});
        layers.push_back(std::move(lw));
    }
    final_norm_gain = Tensor("final_norm.gain", {d});
    final_norm_bias = Tensor("final_norm.bias", {d});
    lm_head = Tensor("lm_head", {d, v});
}

void TransformerModel::visit(const std::function<void(Tensor&)>& fn)
{
    fn(embedding);
    for (auto& l : layers) {
        fn(l.attn_norm_gain);
        fn(l.attn_norm_bias);
        fn(l.wq);
        fn(l.wk);
        fn(l.wv);
        fn(l.wo);
        fn(l.ffn_norm_gain);
        fn(l.ffn_norm_bias);
        fn(l.w_up);
        fn(l.b_up);
        fn(l.w_down);
        fn(l.b_down);
    }
    fn(final_norm_gain);
    fn(final_norm_bias);
    fn(lm_head);
}

void TransformerModel::visit(const std::function<void(const Tensor&)>& fn) const
{
    const_cast<TransformerModel*>(this)->visit([&](Tensor& t) { fn(t); });
}

std::size_t TransformerModel::parameter_count() const
{
    std::size_t n = 0;
    visit([&](const Tensor& t) { n += t.numel(); });
    return n;
}

std::size_t parameter_count(const ModelConfig& c)
{
    const std::size_t v = c.vocab_size, d = c.hidden_dim, f = c.ffn_dim, l = c.num_layers;
    const std::size_t per_layer = 4 * d * d + 2 * d + 2 * d + d * f + f + f * d + d;
    return v * d + l * per_layer + 2 * d + d * v;
}

TransformerModel init_model(const ModelConfig& config)
{
    TransformerModel model(config);
    SplitMix64 rng(config.seed);
    model.visit([&](Tensor& t) {
        if (t.shape.size() == 2) {
            const float bound = std::sqrt(6.0f / static_cast<float>(t.shape[0] + t.shape[1]));
            for (auto& w : t.data)
                w = rng.symmetric(bound);
        } else if (t.name.ends_with(".gain")) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        }
    });
    return model;
}

void embed_token(const TransformerModel& model, TokenId token, std::size_t position, std::span<float> out)
{
    const auto& c = model.config();
    if (token >= c.vocab_size)
        throw std::out_of_range("token id " + std::to_string(token) + " out of range");
    const std::size_t d = c.hidden_dim;
    const float* e = model.embedding.data.data() + static_cast<std::size_t>(token) * d;
    for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(position) * freq;
        out[i] = e[i] + static_cast<float>(std::sin(angle));
        if (i + 1 < d)
            out[i + 1] = e[i + 1] + static_cast<float>(std::cos(angle));
    }
}

void project_key_value(const TransformerModel& model, std::size_t layer, std::span<const float> row,
                       std::span<float> key_out, std::span<float> value_out)
{
    const auto& lw = model.layers[layer];
    std::vector<float> h(row.size());
    layer_norm(row, lw.attn_norm_gain, lw.attn_norm_bias, h);
    matvec(h, lw.wk, key_out);
    matvec(h, lw.wv, value_out);
}

void layer_step(const TransformerModel& model, std::size_t layer, std::span<float> row,
                std::span<float> key_out, std::span<float> value_out, const AttentionView& view)
{
    const auto& c = model.config();
    const auto& lw = model.layers[layer];
    const std::size_t d = c.hidden_dim, hd = c.head_dim(), f = c.ffn_dim;

    std::vector<float> h(d), q(d), attn(d, 0.0f), proj(d);
    layer_norm(row, lw.attn_norm_gain, lw.attn_norm_bias, h);
    matvec(h, lw.wq, q);
    matvec(h, lw.wk, key_out);
    matvec(h, lw.wv, value_out);

    const std::size_t n = view.keys.size();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    std::vector<float> scores(n);
    for (std::size_t head = 0; head < c.num_heads; ++head) {
        const std::size_t off = head * hd;
        float mx = -INFINITY;
        for (std::size_t t = 0; t < n; ++t) {
            const float* k = view.keys[t] + off;
            float s = 0.0f;
            for (std::size_t i = 0; i < hd; ++i)
                s += q[off + i] * k[i];
            scores[t] = s * scale;
            mx = std::max(mx, scores[t]);
        }
        float sum = 0.0f;
        for (std::size_t t = 0; t < n; ++t) {
            scores[t] = std::exp(scores[t] - mx);
            sum += scores[t];
        }
        for (std::size_t t = 0; t < n; ++t) {
            const float w = scores[t] / sum;
            const float* v = view.values[t] + off;
            for (std::size_t i = 0; i < hd; ++i)
                attn[off + i] += w * v[i];
        }
    }
    matvec(attn, lw.wo, proj);
    for (std::size_t i = 0; i < d; ++i)
        row[i] += proj[i];

    std::vector<float> up(f);
    layer_norm(row, lw.ffn_norm_gain, lw.ffn_norm_bias, h);
    matvec(h, lw.w_up, up);
    for (std::size_t j = 0; j < f; ++j)
        up[j] = std::max(0.0f, up[j] + lw.b_up.data[j]);
    matvec(up, lw.w_down, proj);
    for (std::size_t i = 0; i < d; ++i)
        row[i] += proj[i] + lw.b_down.data[i];
}

// ---------------------------------------------------------------------------
// DecodeState

DecodeState::DecodeState(const TransformerModel& model) : model_(&model), caches_(model.config().num_layers) {}

void DecodeState::begin_token(TokenId token)
{
    const auto& c = model_->config();
    if (length_ >= c.max_context)
        throw std::length_error("context overflow: max_context=" + std::to_string(c.max_context));
    // Completed positions no longer need their hidden state.
    std::erase_if(pending_, [&](const Pending& p) { return p.reached == static_cast<int>(c.num_layers) - 1; });
    Pending p{length_, -1, false, std::vector<float>(c.hidden_dim)};
    embed_token(*model_, token, length_, p.hidden);
    pending_.push_back(std::move(p));
    ++length_;
}

void DecodeState::advance(Pending& p, std::size_t layer)
{
    const std::size_t d = model_->config().hidden_dim;
    auto& cache = caches_[layer];
    if (cache.filled != p.position)
        throw std::logic_error("decode cache out of order");
    if (cache.keys.size() < (p.position + 1) * d) {
        cache.keys.resize((p.position + 1) * d);
        cache.values.resize((p.position + 1) * d);
    }
    std::span<float> key(cache.keys.data() + p.position * d, d);
    std::span<float> value(cache.values.data() + p.position * d, d);
    if (p.frozen && stale_cache_) {
        project_key_value(*model_, layer, p.hidden, key, value);
    } else {
        AttentionView view;
        view.keys.reserve(p.position + 1);
        view.values.reserve(p.position + 1);
        for (std::size_t t = 0; t <= p.position; ++t) {
            view.keys.push_back(cache.keys.data() + t * d);
            view.values.push_back(cache.values.data() + t * d);
        }
        layer_step(*model_, layer, p.hidden, key, value, view);
        ++layer_evaluations_;
    }
    ++cache.filled;
    p.reached = static_cast<int>(layer);
}

void DecodeState::catch_up(std::size_t layer)
{
    if (pending_.empty())
        return;
    for (std::size_t i = 0; i + 1 < pending_.size(); ++i) {
        auto& p = pending_[i];
        while (p.reached < static_cast<int>(layer))
            advance(p, static_cast<std::size_t>(p.reached + 1));
    }
}

std::span<const float> DecodeState::run_layer(std::size_t layer)
{
    if (pending_.empty())
        throw std::logic_error("run_layer before begin_token");
    if (layer >= model_->config().num_layers)
        throw std::out_of_range("layer out of range");
    auto& cur = pending_.back();
    if (cur.reached + 1 != static_cast<int>(layer))
        throw std::logic_error("layers must run in order");
    catch_up(layer);
    advance(pending_.back(), layer);
    return pending_.back().hidden;
}

std::span<const float> DecodeState::forward_to_layer(std::size_t stop_layer)
{
    if (stop_layer >= model_->config().num_layers)
        throw std::out_of_range("stop_layer out of range");
    while (current_layer() < static_cast<int>(stop_layer))
        run_layer(static_cast<std::size_t>(current_layer() + 1));
    return current_hidden();
}

int DecodeState::current_layer() const
{
    return pending_.empty() ? -1 : pending_.back().reached;
}

std::span<const float> DecodeState::current_hidden() const
{
    if (pending_.empty())
        throw std::logic_error("no current position");
    return pending_.back().hidden;
}

void DecodeState::freeze_current()
{
    if (!pending_.empty())
        pending_.back().frozen = true;
}

std::span<const float> DecodeState::cached_key(std::size_t layer, std::size_t pos) const
{
    const std::size_t d = model_->config().hidden_dim;
    return {caches_[layer].keys.data() + pos * d, d};
}

std::span<const float> DecodeState::cached_value(std::size_t layer, std::size_t pos) const
{
    const std::size_t d = model_->config().hidden_dim;
    return {caches_[layer].values.data() + pos * d, d};
}

// ---------------------------------------------------------------------------

std::vector<float> forward_to_layer(const TransformerModel& model, std::span<const TokenId> tokens,
                                    std::size_t stop_layer, DecodeState& state)
{
    if (&state.model() != &model)
        throw std::invalid_argument("decode state belongs to a different model");
    if (tokens.empty() && state.length() == 0)
        throw std::invalid_argument("empty token sequence");
    for (std::size_t i = state.length(); i < tokens.size(); ++i)
        state.begin_token(tokens[i]);
    auto h = state.forward_to_layer(stop_layer);
    return {h.begin(), h.end()};
}

std::vector<float> full_forward(const TransformerModel& model, std::span<const TokenId> tokens)
{
    const auto& c = model.config();
    const std::size_t d = c.hidden_dim, n = tokens.size();
    if (n > c.max_context)
        throw std::length_error("context overflow");
    std::vector<float> hidden(n * d);
    for (std::size_t p = 0; p < n; ++p)
        embed_token(model, tokens[p], p, std::span<float>(hidden.data() + p * d, d));
    std::vector<float> keys(n * d), values(n * d);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        AttentionView view;
        for (std::size_t p = 0; p < n; ++p) {
            view.keys.push_back(keys.data() + p * d);
            view.values.push_back(values.data() + p * d);
            layer_step(model, l, std::span<float>(hidden.data() + p * d, d), std::span<float>(keys.data() + p * d, d),
                       std::span<float>(values.data() + p * d, d), view);
        }
    }
    return hidden;
}

std::vector<std::vector<float>> per_layer_last_hidden(const TransformerModel& model, std::span<const TokenId> tokens)
{
    if (tokens.empty())
        throw std::invalid_argument("empty token sequence");
    DecodeState state(model);
    for (auto t : tokens)
        state.begin_token(t);
    std::vector<std::vector<float>> out;
    for (std::size_t l = 0; l < model.config().num_layers; ++l) {
        auto h = state.run_layer(l);
        out.emplace_back(h.begin(), h.end());
    }
    return out;
}

std::vector<float> final_norm(const TransformerModel& model, std::span<const float> hidden)
{
    for (float v : hidden)
        if (!std::isfinite(v))
            throw std::domain_error("non-finite hidden state");
    std::vector<float> out(hidden.size());
    layer_norm(hidden, model.final_norm_gain, model.final_norm_bias, out);
    return out;
}

std::vector<float> full_head_logits(const TransformerModel& model, std::span<const float> hidden)
{
    const auto normed = final_norm(model, hidden);
    std::vector<float> logits(model.config().vocab_size);
    matvec(normed, model.lm_head, logits);
    return logits;
}

std::vector<float> sliced_head_logits(const TransformerModel& model, std::span<const float> hidden,
                                      std::span<const TokenId> token_ids)
{
    const std::size_t v = model.config().vocab_size;
    if (token_ids.empty())
        throw std::invalid_argument("empty token id list");
    for (auto id : token_ids)
        if (id >= v)
            throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    const auto normed = final_norm(model, hidden);
    const float* w = model.lm_head.data.data();
    std::vector<float> out(token_ids.size(), 0.0f);
    for (std::size_t i = 0; i < normed.size(); ++i) {
        const float xi = normed[i];
        const float* row = w + i * v;
        for (std::size_t j = 0; j < token_ids.size(); ++j)
            out[j] += xi * row[token_ids[j]];
    }
    return out;
}

std::size_t argmax(std::span<const float> values)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best])
            best = i;
    return best;
}

}  // namespace specee
