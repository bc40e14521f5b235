#include "test_util.hpp"

#include "specee/engine.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace specee;
using namespace testutil;

namespace {

EngineConfig config_for(std::size_t k, ScheduleMode mode = ScheduleMode::AllLayers)
{
    EngineConfig ec;
    ec.k = k;
    ec.mode = mode;
    ec.schedule.offline_top_k = 2;
    return ec;
}

// Every early-exited token must be the full-head argmax at its exit layer.
void check_trace(const TransformerModel& target, std::vector<TokenId> ctx, const GenerationResult& res)
{
    const std::size_t last = target.config().num_layers - 1;
    for (const auto& r : res.records) {
        const auto am = per_layer_argmax(target, ctx);
        CHECK(r.token == am[r.exit_layer]);
        std::uint32_t fired = 0;
        for (const auto& e : r.evaluations)
            fired += e.fired;
        CHECK(r.full_head_projections == fired + (r.verified ? 0u : 1u));
        CHECK(r.verified == (r.exit_layer < last));
        ctx.push_back(r.token);
    }
}

}  // namespace

TEST_SUITE("engine")
{
    TEST_CASE("verify_exit membership")
    {
        const auto& m = small_target();
        SplitMix64 rng(4);
        std::vector<TokenId> all(256);
        std::iota(all.begin(), all.end(), 0u);
        SpeculativeSet everything{all, std::vector<float>(256, 0.0f)};
        for (int rep = 0; rep < 100; ++rep) {
            const auto h = random_vector(rng, m.config().hidden_dim, 3.0f);
            const auto logits = full_head_logits(m, h);
            const auto top = static_cast<TokenId>(argmax(logits));
            CHECK(verify_exit(m, h, everything) == top);
            SpeculativeSet without;
            for (TokenId t = 0; t < 256 && without.size() < 4; ++t)
                if (t != top)
                    without.tokens.push_back(t);
            CHECK_FALSE(verify_exit(m, h, without).has_value());
        }
    }

    TEST_CASE("verify_exit on the trained model equals a full-sort membership oracle")
    {
        const auto& m = small_target();
        for (std::size_t start = 0; start < 3000; start += 131) {
            const auto ctx = slice(corpus(), start, 24);
            const auto spec = propose_topk(small_draft(), ctx, 4);
            for (const auto& h : per_layer_last_hidden(m, ctx)) {
                const auto logits = full_head_logits(m, h);
                std::vector<TokenId> order(256);
                std::iota(order.begin(), order.end(), 0u);
                std::stable_sort(order.begin(), order.end(),
                                 [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
                const bool member = spec.contains(order[0]);
                const auto v = verify_exit(m, h, spec);
                CHECK(v.has_value() == member);
                if (v)
                    CHECK(*v == order[0]);
            }
        }
    }

    TEST_CASE("oracle exit layer bounds")
    {
        const auto& m = small_target();
        bool saw_zero = false;
        for (std::size_t start = 0; start < 4000; start += 53) {
            const auto ctx = slice(corpus(), start, 20);
            const auto am = per_layer_argmax(m, ctx);
            const auto e = oracle_exit_layer(m, ctx);
            CHECK(e <= 3);
            CHECK(am[e] == am.back());
            for (std::size_t l = 0; l < e; ++l)
                CHECK(am[l] != am.back());
            if (am[0] == am.back()) {
                CHECK(e == 0);
                saw_zero = true;
            }
        }
        CHECK(saw_zero);
    }

    TEST_CASE("never-exit predictor reproduces greedy decoding")
    {
        const ConstantExitPredictor never(0.0f);
        for (std::size_t start : {0u, 700u, 2100u}) {
            const auto prompt = slice(corpus(), start, 24);
            const auto res = generate(small_target(), small_draft(), &never, nullptr, config_for(4), prompt, 40);
            CHECK(res.tokens == greedy_generate(small_target(), prompt, 40));
            for (const auto& r : res.records)
                CHECK(r.exit_layer == 3);
        }
    }

    TEST_CASE("oracle predictor is lossless for full and top-4 speculative sets")
    {
        for (std::size_t k : {4u, 256u}) {
            auto ec = config_for(k);
            ec.oracle = true;
            for (std::size_t start : {100u, 1500u, 2900u}) {
                const auto prompt = slice(corpus(), start, 24);
                const auto res = generate(small_target(), small_draft(), nullptr, nullptr, ec, prompt, 40);
                CHECK(res.tokens == greedy_generate(small_target(), prompt, 40));
                check_trace(small_target(), prompt, res);
                if (k == 256)
                    for (std::size_t i = 0; i < res.records.size(); ++i) {
                        auto ctx = prompt;
                        ctx.insert(ctx.end(), res.tokens.begin(), res.tokens.begin() + static_cast<std::ptrdiff_t>(i));
                        CHECK(res.records[i].exit_layer == oracle_exit_layer(small_target(), ctx));
                    }
            }
        }
    }

    TEST_CASE("always-exit with the full vocabulary exits at the first scheduled layer")
    {
        const ConstantExitPredictor always(1.0f);
        const auto prompt = slice(corpus(), 333, 20);
        const auto res = generate(small_target(), small_draft(), &always, nullptr, config_for(256), prompt, 20);
        for (const auto& r : res.records) {
            CHECK(r.exit_layer == 0);
            CHECK(r.verified);
        }
        check_trace(small_target(), prompt, res);
    }

    TEST_CASE("always-exit with top-4 is still sound and exact under lazy recompute")
    {
        const ConstantExitPredictor always(1.0f);
        const auto prompt = slice(corpus(), 1000, 20);
        const auto res = generate(small_target(), small_draft(), &always, nullptr, config_for(4), prompt, 40);
        check_trace(small_target(), prompt, res);
    }

    TEST_CASE("two-level schedule follows the profile and the online queue")
    {
        const ConstantExitPredictor always(1.0f);
        const auto prof = OfflineProfile::from_counts({0, 0, 5, 0}, 0);
        auto ec = config_for(4, ScheduleMode::TwoLevel);
        ec.schedule.offline_top_k = 1;
        ec.schedule.radius = 0;
        ExitEngine eng(small_target(), small_draft(), &always, &prof, ec);
        eng.reset(slice(corpus(), 10, 20));
        CHECK(eng.scheduled_layers() == std::vector<std::size_t>{2});
        for (int i = 0; i < 15; ++i) {
            const auto expected = eng.scheduled_layers();
            const auto r = eng.generate_token();
            CHECK(r.active_layers == expected);
            std::vector<std::size_t> evaluated;
            for (const auto& e : r.evaluations)
                evaluated.push_back(e.layer);
            CHECK(std::includes(expected.begin(), expected.end(), evaluated.begin(), evaluated.end()));
            CHECK(eng.online().queue().back() == r.exit_layer);
        }
    }

    TEST_CASE("generation bookkeeping")
    {
        const ConstantExitPredictor never(0.0f);
        const auto prompt = slice(corpus(), 50, 10);
        const auto one = generate(small_target(), small_draft(), &never, nullptr, config_for(4), prompt, 1);
        CHECK(one.records.size() == 1);
        const ConstantExitPredictor half(0.7f);
        const auto a = generate(small_target(), small_draft(), &half, nullptr, config_for(4), prompt, 30);
        const auto b = generate(small_target(), small_draft(), &half, nullptr, config_for(4), prompt, 30);
        CHECK(a.tokens == b.tokens);
        REQUIRE(a.records.size() == b.records.size());
        for (std::size_t i = 0; i < a.records.size(); ++i)
            CHECK(format_trace_record(a.records[i]) == format_trace_record(b.records[i]));
        CHECK_THROWS_AS(generate(small_target(), small_draft(), &never, nullptr, config_for(4), prompt, 0),
                        std::invalid_argument);
        CHECK_THROWS_AS(generate(small_target(), small_draft(), &never, nullptr, config_for(4), prompt, 500),
                        std::length_error);
    }

    TEST_CASE("stale cache mode saves layer work")
    {
        const ConstantExitPredictor always(1.0f);
        const auto prompt = slice(corpus(), 1000, 20);
        // Top-4 sets make some verifications fail, so deeper layers run and
        // must catch up on earlier exited positions.
        ExitEngine exact(small_target(), small_draft(), &always, nullptr, config_for(4));
        auto sc = config_for(4);
        sc.stale_cache = true;
        ExitEngine stale(small_target(), small_draft(), &always, nullptr, sc);
        exact.reset(prompt);
        stale.reset(prompt);
        for (int i = 0; i < 20; ++i) {
            exact.generate_token();
            stale.generate_token();
        }
        CHECK(stale.layer_evaluations() < exact.layer_evaluations());
    }

    TEST_CASE("construction errors")
    {
        const ConstantExitPredictor never(0.0f);
        const auto& t = small_target();
        const auto& d = small_draft();
        CHECK_THROWS_AS(ExitEngine(t, d, nullptr, nullptr, config_for(4)), std::invalid_argument);
        CHECK_THROWS_AS(ExitEngine(t, d, &never, nullptr, config_for(0)), std::invalid_argument);
        CHECK_THROWS_AS(ExitEngine(t, d, &never, nullptr, config_for(4, ScheduleMode::TwoLevel)),
                        std::invalid_argument);
        const auto wrong = OfflineProfile::from_counts({1, 2, 3, 4, 5}, 0);
        CHECK_THROWS_AS(ExitEngine(t, d, &never, &wrong, config_for(4, ScheduleMode::TwoLevel)),
                        std::invalid_argument);
        const auto other_vocab = init_model(tiny_config(1, 1, 128));
        CHECK_THROWS_AS(ExitEngine(t, other_vocab, &never, nullptr, config_for(4)), std::invalid_argument);
        ExitEngine eng(t, d, &never, nullptr, config_for(4));
        CHECK_THROWS_AS(eng.generate_token(), std::logic_error);
        CHECK_THROWS_AS(eng.reset(std::vector<TokenId>{}), std::invalid_argument);
    }

    TEST_CASE("a bank without an active layer is an error")
    {
        PredictorBank bank;
        bank.k = 4;
        bank.hidden = 2;
        bank.by_layer[0] = PredictorWeights::zeros(12, 2);
        const MlpExitPredictor partial(bank);
        ExitEngine eng(small_target(), small_draft(), &partial, nullptr, config_for(4));
        eng.reset(slice(corpus(), 0, 10));
        CHECK_THROWS_AS(eng.generate_token(), std::runtime_error);
    }

    TEST_CASE("prompt windows")
    {
        const std::vector<TokenId> text(300, 1);
        const auto p = make_prompts(text, PromptPlan{32, 8, 64, 0});
        CHECK(p.size() == 5);
        CHECK(make_prompts(text, PromptPlan{32, 8, 64, 2}).size() == 2);
        CHECK(make_prompts(std::vector<TokenId>(10, 1), PromptPlan{32, 8, 64, 0}).empty());
        CHECK_THROWS_AS(make_prompts(text, PromptPlan{0, 8, 64, 0}), std::invalid_argument);
    }
}
