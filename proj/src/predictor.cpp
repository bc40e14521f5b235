#include "specee/predictor.hpp"

#include "specee/binio.hpp"
#include "specee/numeric.hpp"
#include "specee/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace specee {

std::vector<float> FeatureVector::flat() const
{
    std::vector<float> out;
    out.reserve(dimension());
    out.insert(out.end(), spec_logits.begin(), spec_logits.end());
    out.insert(out.end(), local_probs.begin(), local_probs.end());
    out.insert(out.end(), prob_variation.begin(), prob_variation.end());
    return out;
}

std::vector<float> uniform_probs(std::size_t k)
{
    if (k == 0)
        throw std::invalid_argument("k must be positive");
    return std::vector<float>(k, 1.0f / static_cast<float>(k));
}

FeatureVector extract_features(std::span<const float> spec_logits, std::span<const float> prev_local_probs)
{
    if (spec_logits.empty())
        throw std::invalid_argument("empty speculative logits");
    if (prev_local_probs.size() != spec_logits.size())
        throw std::invalid_argument("previous probabilities have wrong length");
    FeatureVector f;
    f.spec_logits.assign(spec_logits.begin(), spec_logits.end());
    f.local_probs = softmax(spec_logits);
    f.prob_variation.resize(f.k());
    for (std::size_t j = 0; j < f.k(); ++j)
        f.prob_variation[j] = f.local_probs[j] - prev_local_probs[j];
    return f;
}

PredictorWeights PredictorWeights::zeros(std::size_t input_dim, std::size_t hidden)
{
    PredictorWeights w;
    w.input_dim = input_dim;
    w.hidden = hidden;
    w.w1.assign(input_dim * hidden, 0.0f);
    w.b1.assign(hidden, 0.0f);
    w.w2.assign(hidden, 0.0f);
    return w;
}

void PredictorWeights::validate() const
{
    if (hidden < 1 || input_dim < 1)
        throw std::invalid_argument("predictor dimensions must be positive");
    if (w1.size() != input_dim * hidden || b1.size() != hidden || w2.size() != hidden)
        throw std::invalid_argument("predictor weight shapes inconsistent");
    if (!(threshold > 0.0f && threshold < 1.0f))
        throw std::invalid_argument("threshold must be in (0, 1)");
}

float predictor_forward(const PredictorWeights& w, std::span<const float> features)
{
    if (features.size() != w.input_dim)
        throw std::invalid_argument("feature dimension " + std::to_string(features.size()) +
                                    " does not match predictor input " + std::to_string(w.input_dim));
    std::vector<float> h(w.b1);
    for (std::size_t i = 0; i < w.input_dim; ++i) {
        const float x = features[i];
        const float* row = w.w1.data() + i * w.hidden;
        for (std::size_t j = 0; j < w.hidden; ++j)
            h[j] += x * row[j];
    }
    float z = w.b2;
    for (std::size_t j = 0; j < w.hidden; ++j)
        z += std::max(0.0f, h[j]) * w.w2[j];
    return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
}

float predictor_forward(const PredictorWeights& w, const FeatureVector& f)
{
    return predictor_forward(w, f.flat());
}

// ---------------------------------------------------------------------------
// Training data

std::size_t TrainingSet::size() const
{
    std::size_t n = 0;
    for (const auto& v : per_layer)
        n += v.size();
    return n;
}

const std::vector<TrainingExample>& TrainingSet::for_layer(std::size_t layer) const
{
    const auto it = std::find(layers.begin(), layers.end(), layer);
    if (it == layers.end())
        throw std::out_of_range("no training data for layer " + std::to_string(layer));
    return per_layer[static_cast<std::size_t>(it - layers.begin())];
}

TrainingSet collect_training_data(const TransformerModel& target, const TransformerModel& draft,
                                  std::span<const TokenId> corpus, std::span<const std::size_t> layers,
                                  const CollectConfig& config)
{
    if (corpus.empty())
        throw std::invalid_argument("empty corpus");
    if (config.prompt_len < 1 || config.stride < 1)
        throw std::invalid_argument("prompt_len and stride must be positive");
    const std::size_t num_layers = target.config().num_layers;
    TrainingSet set;
    set.layers.assign(layers.begin(), layers.end());
    std::sort(set.layers.begin(), set.layers.end());
    set.layers.erase(std::unique(set.layers.begin(), set.layers.end()), set.layers.end());
    for (auto l : set.layers)
        if (l >= num_layers)
            throw std::out_of_range("layer " + std::to_string(l) + " out of range");
    set.per_layer.resize(set.layers.size());

    Drafter drafter(draft);
    std::size_t segments = 0;
    for (std::size_t start = 0; start + config.prompt_len <= corpus.size(); start += config.stride) {
        if (config.max_segments && segments == config.max_segments)
            break;
        ++segments;
        std::vector<TokenId> context(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                                     corpus.begin() + static_cast<std::ptrdiff_t>(start + config.prompt_len));
        DecodeState state(target);
        for (auto t : context)
            state.begin_token(t);
        for (std::size_t step = 0; step < config.max_new; ++step) {
            const auto spec = drafter.propose(context, config.k);
            std::vector<std::vector<float>> hidden;
            for (std::size_t l = 0; l < num_layers; ++l) {
                const auto h = state.run_layer(l);
                hidden.emplace_back(h.begin(), h.end());
            }
            const auto final_token = static_cast<TokenId>(argmax(full_head_logits(target, hidden.back())));
            auto prev = uniform_probs(config.k);
            for (std::size_t i = 0; i < set.layers.size(); ++i) {
                const std::size_t l = set.layers[i];
                const auto logits = sliced_head_logits(target, hidden[l], spec.tokens);
                TrainingExample ex;
                ex.features = extract_features(logits, prev);
                prev = ex.features.local_probs;
                ex.label = argmax(full_head_logits(target, hidden[l])) == final_token;
                ex.layer = l;
                set.per_layer[i].push_back(std::move(ex));
            }
            ++set.tokens;
            context.push_back(final_token);
            if (context.size() >= target.config().max_context)
                break;
            state.begin_token(final_token);
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Training

namespace {

double softplus(double x)
{
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

double predictor_loss(const MlpParams& p, std::span<const std::vector<double>> inputs, std::span<const std::uint8_t> labels,
                      double pos_weight, double neg_weight, MlpParams* grad)
{
    if (inputs.size() != labels.size() || inputs.empty())
        throw std::invalid_argument("inputs/labels mismatch");
    const std::size_t in = p.input_dim, hid = p.hidden;
    if (grad) {
        grad->input_dim = in;
        grad->hidden = hid;
        grad->w1.assign(in * hid, 0.0);
        grad->b1.assign(hid, 0.0);
        grad->w2.assign(hid, 0.0);
        grad->b2 = 0.0;
    }
    const double inv_n = 1.0 / static_cast<double>(inputs.size());
    std::vector<double> z1(hid);
    double loss = 0.0;
    for (std::size_t n = 0; n < inputs.size(); ++n) {
        const auto& x = inputs[n];
        std::copy(p.b1.begin(), p.b1.end(), z1.begin());
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = x[i];
            const double* row = p.w1.data() + i * hid;
            for (std::size_t j = 0; j < hid; ++j)
                z1[j] += xi * row[j];
        }
        double z2 = p.b2;
        for (std::size_t j = 0; j < hid; ++j)
            z2 += std::max(0.0, z1[j]) * p.w2[j];
        const bool y = labels[n] != 0;
        loss += (y ? pos_weight * softplus(-z2) : neg_weight * softplus(z2)) * inv_n;
        if (!grad)
            continue;
        const double prob = 1.0 / (1.0 + std::exp(-z2));
        const double dz2 = (y ? pos_weight * (prob - 1.0) : neg_weight * prob) * inv_n;
        grad->b2 += dz2;
        for (std::size_t j = 0; j < hid; ++j) {
            if (z1[j] <= 0.0)
                continue;
            grad->w2[j] += dz2 * z1[j];
            const double dz1 = dz2 * p.w2[j];
            grad->b1[j] += dz1;
            for (std::size_t i = 0; i < in; ++i)
                grad->w1[i * hid + j] += dz1 * x[i];
        }
    }
    return loss;
}

PredictorTrainResult train_predictor(std::span<const TrainingExample> examples, const PredictorTrainConfig& config)
{
    if (examples.empty())
        throw std::invalid_argument("no training examples");
    if (config.hidden < 1 || config.batch_size < 1)
        throw std::invalid_argument("hidden and batch_size must be positive");
    const std::size_t in = examples.front().features.dimension();
    const std::size_t n = examples.size();

    std::vector<std::vector<double>> raw(n);
    std::vector<std::uint8_t> labels(n);
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto f = examples[i].features.flat();
        if (f.size() != in)
            throw std::invalid_argument("inconsistent feature dimensions");
        raw[i].assign(f.begin(), f.end());
        labels[i] = examples[i].label ? 1 : 0;
        positives += examples[i].label;
    }

    // Standardize each input dimension.
    std::vector<double> mean(in, 0.0), scale(in, 0.0);
    for (const auto& x : raw)
        for (std::size_t i = 0; i < in; ++i)
            mean[i] += x[i];
    for (auto& m : mean)
        m /= static_cast<double>(n);
    for (const auto& x : raw)
        for (std::size_t i = 0; i < in; ++i)
            scale[i] += (x[i] - mean[i]) * (x[i] - mean[i]);
    for (auto& s : scale) {
        s = std::sqrt(s / static_cast<double>(n));
        if (s < 1e-6)
            s = 1.0;
    }
    std::vector<std::vector<double>> inputs = raw;
    for (auto& x : inputs)
        for (std::size_t i = 0; i < in; ++i)
            x[i] = (x[i] - mean[i]) / scale[i];

    double pos_w = 1.0, neg_w = 1.0;
    if (config.class_balance && positives > 0 && positives < n) {
        pos_w = static_cast<double>(n) / (2.0 * static_cast<double>(positives));
        neg_w = static_cast<double>(n) / (2.0 * static_cast<double>(n - positives));
    }

    SplitMix64 rng(config.seed);
    MlpParams p;
    p.input_dim = in;
    p.hidden = config.hidden;
    const double b1 = std::sqrt(6.0 / static_cast<double>(in + config.hidden));
    const double b2 = std::sqrt(6.0 / static_cast<double>(config.hidden + 1));
    p.w1.resize(in * config.hidden);
    for (auto& w : p.w1)
        w = (2.0 * rng.uniform_double() - 1.0) * b1;
    p.b1.assign(config.hidden, 0.0);
    p.w2.resize(config.hidden);
    for (auto& w : p.w2)
        w = (2.0 * rng.uniform_double() - 1.0) * b2;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    PredictorTrainResult result;
    MlpParams grad;
    std::vector<std::vector<double>> batch_x;
    std::vector<std::uint8_t> batch_y;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        for (std::size_t b = 0; b < n; b += config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for (std::size_t i = b; i < std::min(n, b + config.batch_size); ++i) {
                batch_x.push_back(inputs[order[i]]);
                batch_y.push_back(labels[order[i]]);
            }
            predictor_loss(p, batch_x, batch_y, pos_w, neg_w, &grad);
            const double lr = config.learning_rate;
            for (std::size_t i = 0; i < p.w1.size(); ++i)
                p.w1[i] -= lr * grad.w1[i];
            for (std::size_t j = 0; j < p.hidden; ++j) {
                p.b1[j] -= lr * grad.b1[j];
                p.w2[j] -= lr * grad.w2[j];
            }
            p.b2 -= lr * grad.b2;
        }
        result.epoch_loss.push_back(predictor_loss(p, inputs, labels, pos_w, neg_w, nullptr));
    }

    // Fold the standardization into the first layer.
    auto& w = result.weights;
    w = PredictorWeights::zeros(in, config.hidden);
    w.threshold = config.threshold;
    for (std::size_t j = 0; j < config.hidden; ++j) {
        double bias = p.b1[j];
        for (std::size_t i = 0; i < in; ++i) {
            const double wij = p.w1[i * config.hidden + j] / scale[i];
            w.w1[i * config.hidden + j] = static_cast<float>(wij);
            bias -= mean[i] * wij;
        }
        w.b1[j] = static_cast<float>(bias);
        w.w2[j] = static_cast<float>(p.w2[j]);
    }
    w.b2 = static_cast<float>(p.b2);

    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<float> x(raw[i].begin(), raw[i].end());
        correct += decide_exit(predictor_forward(w, x), w.threshold) == examples[i].label;
    }
    result.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    result.positive_rate = static_cast<double>(positives) / static_cast<double>(n);
    return result;
}

PredictorFootprint predictor_param_count(std::size_t k, std::size_t hidden, std::size_t num_layers,
                                         std::size_t bytes_per_param)
{
    if (k == 0 || hidden == 0 || num_layers == 0 || bytes_per_param == 0)
        throw std::invalid_argument("arguments must be positive");
    PredictorFootprint fp;
    fp.params_per_layer = 3 * k * hidden + hidden;
    fp.params_per_layer_with_bias = fp.params_per_layer + hidden + 1;
    fp.total_params = fp.params_per_layer * num_layers;
    fp.kilobytes = static_cast<double>(fp.total_params * bytes_per_param) / 1024.0;
    return fp;
}

// ---------------------------------------------------------------------------
// SPXP

std::vector<char> serialize_predictors(const PredictorBank& bank)
{
    ByteWriter w;
    w.bytes("SPXP");
    w.u32(kPredictorFileVersion);
    w.u32(static_cast<std::uint32_t>(bank.k));
    w.u32(static_cast<std::uint32_t>(bank.hidden));
    w.u32(static_cast<std::uint32_t>(bank.by_layer.size()));
    for (const auto& [layer, p] : bank.by_layer) {
        if (p.input_dim != 3 * bank.k || p.hidden != bank.hidden)
            throw std::invalid_argument("predictor for layer " + std::to_string(layer) + " has wrong shape");
        w.u32(static_cast<std::uint32_t>(layer));
        w.f32(p.threshold);
        w.f32s(p.w1);
        w.f32s(p.b1);
        w.f32s(p.w2);
        w.f32(p.b2);
    }
    return w.data();
}

PredictorBank deserialize_predictors(std::span<const char> bytes)
{
    ByteReader r(bytes);
    if (r.bytes(4) != "SPXP")
        throw FormatError("bad magic (expected SPXP)");
    if (const auto v = r.u32(); v != kPredictorFileVersion)
        throw FormatError("unsupported predictor file version " + std::to_string(v));
    PredictorBank bank;
    bank.k = r.u32();
    bank.hidden = r.u32();
    if (bank.k == 0 || bank.hidden == 0)
        throw FormatError("invalid predictor dimensions");
    const std::uint32_t blocks = r.u32();
    for (std::uint32_t b = 0; b < blocks; ++b) {
        const std::size_t layer = r.u32();
        auto p = PredictorWeights::zeros(3 * bank.k, bank.hidden);
        p.threshold = r.f32();
        r.f32s(p.w1);
        r.f32s(p.b1);
        r.f32s(p.w2);
        p.b2 = r.f32();
        try {
            p.validate();
        } catch (const std::invalid_argument& e) {
            throw FormatError(e.what());
        }
        if (!bank.by_layer.emplace(layer, std::move(p)).second)
            throw FormatError("duplicate predictor for layer " + std::to_string(layer));
    }
    if (!r.done())
        throw FormatError("trailing bytes in predictor file");
    return bank;
}

void save_predictors(const PredictorBank& bank, const std::string& path)
{
    write_file(path, serialize_predictors(bank));
}

PredictorBank load_predictors(const std::string& path)
{
    return deserialize_predictors(read_file(path));
}

}  // namespace specee
