#pragma once

#include "specee/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace specee {

struct TrainConfig {
    std::size_t seq_len = 64;
    std::size_t batch_size = 8;
    std::size_t epochs = 1;
    float learning_rate = 0.1f;
    /// 0 = use every window each epoch.
    std::size_t max_batches_per_epoch = 0;
    /// Global gradient-norm clip; 0 disables.
    float grad_clip = 1.0f;
    std::uint64_t seed = 1;
};

struct TrainReport {
    std::vector<double> epoch_loss;  // mean training loss per epoch
    std::vector<double> step_loss;   // per batch
};

std::vector<TokenId> bytes_to_tokens(std::span<const std::uint8_t> bytes);

/// Plain SGD on next-token cross-entropy. Window order is shuffled per epoch
/// from the config seed, so the run is a pure function of its inputs.
TrainReport train_language_model(TransformerModel& model, std::span<const TokenId> corpus, const TrainConfig& config);

/// Mean next-token cross-entropy (nats) of `seq` under the model.
double sequence_loss(const TransformerModel& model, std::span<const TokenId> seq);

/// Sum (not mean) of next-token cross-entropy over `seq`; gradients of that
/// sum are accumulated into `grad`, which must share the model's config.
double loss_and_gradient(const TransformerModel& model, std::span<const TokenId> seq, TransformerModel& grad);

}  // namespace specee
