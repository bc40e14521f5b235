#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace specee {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::uint32_t vocab_size = 256;
    std::uint32_t hidden_dim = 64;
    std::uint32_t num_layers = 8;
    std::uint32_t num_heads = 4;
    std::uint32_t ffn_dim = 256;
    std::uint32_t max_context = 512;
    std::uint64_t seed = 1;

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;

    std::uint32_t head_dim() const { return hidden_dim / num_heads; }

    static ModelConfig target_default() { return {}; }
    static ModelConfig draft_default()
    {
        ModelConfig c;
        c.num_layers = 2;
        c.seed = 2;
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Dense row-major float tensor with a stable name used in the weight file.
struct Tensor {
    std::string name;
    std::vector<std::uint32_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::string n, std::vector<std::uint32_t> s);

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

struct LayerWeights {
    Tensor attn_norm_gain, attn_norm_bias;
    Tensor wq, wk, wv, wo;  // hidden x hidden, input-major
    Tensor ffn_norm_gain, ffn_norm_bias;
    Tensor w_up, b_up;      // hidden x ffn, ffn
    Tensor w_down, b_down;  // ffn x hidden, hidden
};

/// Decoder-only pre-norm transformer. Weights are immutable after init,
/// load, or training; every inference entry point takes it by const ref.
class TransformerModel {
public:
    TransformerModel() = default;
    explicit TransformerModel(const ModelConfig& config);  // zero weights, correct shapes

    const ModelConfig& config() const { return config_; }

    Tensor embedding;             // vocab x hidden
    std::vector<LayerWeights> layers;
    Tensor final_norm_gain, final_norm_bias;
    Tensor lm_head;               // hidden x vocab

    /// Visits every weight tensor in declaration order (the order used for
    /// initialization, serialization and parameter counting).
    void visit(const std::function<void(Tensor&)>& fn);
    void visit(const std::function<void(const Tensor&)>& fn) const;

    std::size_t parameter_count() const;

private:
    ModelConfig config_;
};

/// Closed-form parameter count for a config, independent of tensor storage.
std::size_t parameter_count(const ModelConfig& config);

/// Seeded deterministic initialization: 2-D tensors are Xavier-uniform from a
/// single splitmix64 stream in declaration order; norm gains are 1, biases 0.
TransformerModel init_model(const ModelConfig& config);

/// Per-stream key/value cache plus the hidden states of positions that have
/// not yet run through every layer (early-exited or freshly appended tokens).
///
/// Positions are appended with begin_token(). run_layer(j) first completes
/// layer j for every earlier position that still lacks it, in position order,
/// then runs layer j for the newest position. Because all work for one row is
/// done by the same routine with a fixed accumulation order, any split of the
/// layer schedule yields bit-identical hidden states.
class DecodeState {
public:
    explicit DecodeState(const TransformerModel& model);

    const TransformerModel& model() const { return *model_; }

    std::size_t length() const { return length_; }

    /// Appends a position holding the embedding of `token` plus its
    /// sinusoidal position code. Throws on context overflow or bad id.
    void begin_token(TokenId token);

    /// Runs layer `layer` for the newest position; `layer` must be one past the
    /// last layer it ran. Returns the post-layer hidden state.
    std::span<const float> run_layer(std::size_t layer);

    /// Runs the newest position through layers up to and including `stop_layer`.
    std::span<const float> forward_to_layer(std::size_t stop_layer);

    /// Last layer run by the newest position, or -1 if none yet.
    int current_layer() const;

    std::span<const float> current_hidden() const;

    /// When set, positions frozen by freeze_current() fill deeper caches by
    /// projecting their exit hidden state instead of running the skipped layers.
    void set_stale_cache(bool enabled) { stale_cache_ = enabled; }
    bool stale_cache() const { return stale_cache_; }

    /// Marks the newest position as early-exited. Only affects stale-cache mode.
    void freeze_current();

    /// Number of layer evaluations performed so far, including catch-up work.
    std::uint64_t layer_evaluations() const { return layer_evaluations_; }

    /// Number of cached positions for `layer`.
    std::size_t cached(std::size_t layer) const { return caches_[layer].filled; }

    std::span<const float> cached_key(std::size_t layer, std::size_t pos) const;
    std::span<const float> cached_value(std::size_t layer, std::size_t pos) const;

    /// Completes layer `layer` for all earlier positions that lack it. Used by
    /// the tree forward before attaching tree nodes to the context.
    void catch_up(std::size_t layer);

private:
    struct LayerCache {
        std::vector<float> keys;
        std::vector<float> values;
        std::size_t filled = 0;
    };
    struct Pending {
        std::size_t position;
        int reached;  // last completed layer, -1 = embedding only
        bool frozen;
        std::vector<float> hidden;
    };

    void advance(Pending& p, std::size_t layer);

    const TransformerModel* model_;
    std::vector<LayerCache> caches_;
    std::vector<Pending> pending_;  // ascending positions; newest at back
    std::size_t length_ = 0;
    bool stale_cache_ = false;
    std::uint64_t layer_evaluations_ = 0;
};

/// Key/value rows visible to one query row, in attention order.
struct AttentionView {
    std::vector<const float*> keys;
    std::vector<const float*> values;
};

/// One transformer block applied to a single row in place. The row's own
/// key/value are written to key_out/value_out before attention, so `view`
/// must already point at them as its last entry.
void layer_step(const TransformerModel& model, std::size_t layer, std::span<float> row,
                std::span<float> key_out, std::span<float> value_out, const AttentionView& view);

/// Key/value projection only (used by stale-cache fill).
void project_key_value(const TransformerModel& model, std::size_t layer, std::span<const float> row,
                       std::span<float> key_out, std::span<float> value_out);

void embed_token(const TransformerModel& model, TokenId token, std::size_t position, std::span<float> out);

/// Convenience wrapper: appends `tokens` beyond state.length() and runs the
/// newest position through stop_layer.
std::vector<float> forward_to_layer(const TransformerModel& model, std::span<const TokenId> tokens,
                                    std::size_t stop_layer, DecodeState& state);

/// Layer-major forward over a whole sequence; returns final-layer hidden
/// states for every position (positions x hidden, row-major).
std::vector<float> full_forward(const TransformerModel& model, std::span<const TokenId> tokens);

/// Hidden states of the last position after every layer (layers x hidden).
std::vector<std::vector<float>> per_layer_last_hidden(const TransformerModel& model,
                                                      std::span<const TokenId> tokens);

std::vector<float> final_norm(const TransformerModel& model, std::span<const float> hidden);
std::vector<float> full_head_logits(const TransformerModel& model, std::span<const float> hidden);
std::vector<float> sliced_head_logits(const TransformerModel& model, std::span<const float> hidden,
                                      std::span<const TokenId> token_ids);

/// Index of the maximum, lowest index on ties.
std::size_t argmax(std::span<const float> values);

}  // namespace specee
