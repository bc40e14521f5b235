#pragma once

#include "specee/model.hpp"
#include "specee/speculation.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace specee {

/// Exit features for one speculative set at one layer. The flattened order
/// (logits block, probabilities block, variation block) is part of the
/// predictor file contract.
struct FeatureVector {
    std::vector<float> spec_logits;
    std::vector<float> local_probs;
    std::vector<float> prob_variation;

    std::size_t k() const { return spec_logits.size(); }
    std::size_t dimension() const { return 3 * k(); }
    std::vector<float> flat() const;
};

std::vector<float> uniform_probs(std::size_t k);

/// local_probs = softmax(spec_logits); prob_variation = local_probs - prev.
FeatureVector extract_features(std::span<const float> spec_logits, std::span<const float> prev_local_probs);

/// 2-layer MLP: sigmoid(w2 . relu(W1^T f + b1) + b2).
struct PredictorWeights {
    std::size_t input_dim = 0;
    std::size_t hidden = 0;
    std::vector<float> w1;  // input_dim x hidden
    std::vector<float> b1;  // hidden
    std::vector<float> w2;  // hidden
    float b2 = 0.0f;
    float threshold = 0.5f;

    static PredictorWeights zeros(std::size_t input_dim, std::size_t hidden);
    void validate() const;
};

float predictor_forward(const PredictorWeights& w, std::span<const float> features);
float predictor_forward(const PredictorWeights& w, const FeatureVector& f);

/// Strict comparison: a probability equal to the threshold does not exit.
inline bool decide_exit(float prob, float threshold) { return prob > threshold; }

struct TrainingExample {
    FeatureVector features;
    bool label = false;
    std::size_t layer = 0;
};

/// Examples grouped per layer, in ascending layer order.
struct TrainingSet {
    std::vector<std::size_t> layers;
    std::vector<std::vector<TrainingExample>> per_layer;
    std::size_t tokens = 0;

    std::size_t size() const;
    const std::vector<TrainingExample>& for_layer(std::size_t layer) const;
};

struct CollectConfig {
    std::size_t k = 4;
    std::size_t prompt_len = 32;
    std::size_t max_new = 32;
    /// Distance between consecutive prompt starts in the corpus.
    std::size_t stride = 64;
    /// 0 = as many segments as the corpus allows.
    std::size_t max_segments = 0;
};

/// Greedy full-model generation from corpus prompts. At each generated token
/// and each requested layer, records features and the label "layer argmax
/// equals final-layer argmax".
TrainingSet collect_training_data(const TransformerModel& target, const TransformerModel& draft,
                                  std::span<const TokenId> corpus, std::span<const std::size_t> layers,
                                  const CollectConfig& config);

/// Double-precision mirror of PredictorWeights used during training.
struct MlpParams {
    std::size_t input_dim = 0, hidden = 0;
    std::vector<double> w1, b1, w2;
    double b2 = 0.0;
};

/// Mean class-weighted binary cross-entropy (labels 0/1). Gradients of that
/// mean are written to `grad` when non-null.
double predictor_loss(const MlpParams& p, std::span<const std::vector<double>> inputs, std::span<const std::uint8_t> labels,
                      double pos_weight, double neg_weight, MlpParams* grad);

struct PredictorTrainConfig {
    std::size_t hidden = 512;
    std::size_t epochs = 60;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    bool class_balance = true;
    float threshold = 0.5f;
    std::uint64_t seed = 7;
};

struct PredictorTrainResult {
    PredictorWeights weights;
    std::vector<double> epoch_loss;  // full-set loss after each epoch
    double train_accuracy = 0.0;
    double positive_rate = 0.0;
};

/// Minibatch SGD on standardized features; the standardization is folded
/// into W1/b1 afterwards so inference takes raw features.
PredictorTrainResult train_predictor(std::span<const TrainingExample> examples, const PredictorTrainConfig& config);

struct PredictorFootprint {
    std::size_t params_per_layer = 0;            // 3k*H + H, biases excluded
    std::size_t params_per_layer_with_bias = 0;  // + H + 1
    std::size_t total_params = 0;                // bias-free, all layers
    double kilobytes = 0.0;
};

/// Memory estimate for `num_layers` predictors stored at `bytes_per_param`.
PredictorFootprint predictor_param_count(std::size_t k, std::size_t hidden, std::size_t num_layers,
                                         std::size_t bytes_per_param = 2);

/// Per-layer predictors of one engine. File layout (little-endian):
///   "SPXP" u32 version u32 k u32 hidden u32 blocks
///   per block: u32 layer, f32 threshold, W1, b1, W2, b2 (f32)
struct PredictorBank {
    std::size_t k = 4;
    std::size_t hidden = 512;
    std::map<std::size_t, PredictorWeights> by_layer;

    bool has(std::size_t layer) const { return by_layer.contains(layer); }
};

inline constexpr std::uint32_t kPredictorFileVersion = 1;

std::vector<char> serialize_predictors(const PredictorBank& bank);
PredictorBank deserialize_predictors(std::span<const char> bytes);
void save_predictors(const PredictorBank& bank, const std::string& path);
PredictorBank load_predictors(const std::string& path);

}  // namespace specee
