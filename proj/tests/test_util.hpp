#pragma once

#include "specee/harness.hpp"
#include "specee/model.hpp"
#include "specee/rng.hpp"
#include "specee/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace testutil {

using namespace specee;

inline std::filesystem::path source_dir() { return SPECEE_SOURCE_DIR; }

inline const std::vector<TokenId>& corpus()
{
    static const auto c = load_corpus(source_dir() / "data/corpus.txt");
    return c;
}

inline const std::vector<TokenId>& heldout()
{
    static const auto c = load_corpus(source_dir() / "data/heldout.txt");
    return c;
}

inline ModelConfig tiny_config(std::uint32_t layers, std::uint64_t seed, std::uint32_t vocab = 256)
{
    ModelConfig c;
    c.vocab_size = vocab;
    c.hidden_dim = 16;
    c.num_layers = layers;
    c.num_heads = 2;
    c.ffn_dim = 32;
    c.max_context = 128;
    c.seed = seed;
    return c;
}

// Small byte-level models trained briefly on the corpus; shared by tests
// that need non-random behaviour.
inline const TransformerModel& small_target()
{
    static const TransformerModel m = [] {
        auto c = tiny_config(4, 21);
        c.hidden_dim = 32;
        c.ffn_dim = 64;
        auto model = init_model(c);
        TrainConfig tc;
        tc.batch_size = 1;
        tc.learning_rate = 0.3f;
        tc.max_batches_per_epoch = 300;
        tc.seed = 5;
        train_language_model(model, corpus(), tc);
        return model;
    }();
    return m;
}

inline const TransformerModel& small_draft()
{
    static const TransformerModel m = [] {
        auto c = tiny_config(1, 22);
        auto model = init_model(c);
        TrainConfig tc;
        tc.batch_size = 1;
        tc.learning_rate = 0.3f;
        tc.max_batches_per_epoch = 200;
        tc.seed = 6;
        train_language_model(model, corpus(), tc);
        return model;
    }();
    return m;
}

inline std::vector<TokenId> slice(const std::vector<TokenId>& v, std::size_t start, std::size_t len)
{
    return {v.begin() + static_cast<std::ptrdiff_t>(start), v.begin() + static_cast<std::ptrdiff_t>(start + len)};
}

inline std::vector<float> random_vector(SplitMix64& rng, std::size_t n, float scale = 1.0f)
{
    std::vector<float> v(n);
    for (auto& x : v)
        x = rng.symmetric(scale);
    return v;
}

inline bool close_rel(double a, double b, double tol)
{
    return std::fabs(a - b) <= tol * std::max(1.0, std::max(std::fabs(a), std::fabs(b)));
}

inline std::filesystem::path temp_dir(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("specee_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
