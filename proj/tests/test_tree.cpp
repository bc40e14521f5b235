#include "test_util.hpp"

#include "specee/tree.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <numeric>

using namespace specee;
using namespace testutil;

namespace {

TreeEngineConfig tree_config(std::vector<std::size_t> branching)
{
    TreeEngineConfig tc;
    tc.branching = std::move(branching);
    tc.schedule.offline_top_k = 2;
    return tc;
}

}  // namespace

TEST_SUITE("tree")
{
    TEST_CASE("hyper-token counts and speculative sets")
    {
        const auto ctx = slice(corpus(), 800, 20);
        const std::vector<std::size_t> br{3, 2};
        const auto tree = build_token_tree(small_draft(), ctx, br);
        const auto hts = merge_paths(small_draft(), tree, ctx, 4);
        REQUIRE(hts.size() == 6);
        for (const auto& ht : hts) {
            CHECK(ht.path.size() == 2);
            REQUIRE(ht.per_node_spec.size() == 2);
            std::vector<TokenId> kids;
            for (auto c : tree.children(ht.path[0]))
                kids.push_back(tree.nodes[c].token);
            CHECK(ht.per_node_spec[0].tokens == kids);
            CHECK(ht.per_node_spec[1].tokens ==
                  propose_topk(small_draft(), path_context(tree, ctx, ht.path[1]), 4).tokens);
        }
        const auto single = merge_paths(small_draft(), build_token_tree(small_draft(), ctx, std::vector<std::size_t>{1}),
                                        ctx, 4);
        REQUIRE(single.size() == 1);
        CHECK(single[0].path.size() == 1);
    }

    TEST_CASE("grouped logits equal sliced and full-head logits")
    {
        const auto& m = small_target();
        SplitMix64 rng(17);
        std::vector<std::vector<float>> rows;
        std::vector<std::vector<TokenId>> ids;
        for (int j = 0; j < 6; ++j) {
            rows.push_back(random_vector(rng, m.config().hidden_dim, 2.0f));
            std::vector<TokenId> list(1 + rng.below(6));
            for (auto& t : list)
                t = static_cast<TokenId>(rng.below(256));
            ids.push_back(list);
        }
        std::vector<std::span<const float>> views(rows.begin(), rows.end());
        const auto g = grouped_speculative_logits(m, views, ids);
        for (std::size_t j = 0; j < rows.size(); ++j) {
            CHECK(g[j] == sliced_head_logits(m, rows[j], ids[j]));
            const auto full = full_head_logits(m, rows[j]);
            for (std::size_t i = 0; i < ids[j].size(); ++i)
                CHECK(g[j][i] == full[ids[j][i]]);
        }
        // Single row, and every id for every row.
        CHECK(grouped_speculative_logits(m, std::span(views.data(), 1), std::span(ids.data(), 1))[0] ==
              sliced_head_logits(m, rows[0], ids[0]));
        std::vector<TokenId> all(256);
        std::iota(all.begin(), all.end(), 0u);
        const std::vector<std::vector<TokenId>> all_ids(rows.size(), all);
        const auto ga = grouped_speculative_logits(m, views, all_ids);
        for (std::size_t j = 0; j < rows.size(); ++j) {
            const auto full = full_head_logits(m, rows[j]);
            for (std::size_t i = 0; i < 256; ++i)
                CHECK(close_rel(ga[j][i], full[i], 1e-6));
        }
        // Node order permutes outputs.
        std::vector<std::span<const float>> rv(views.rbegin(), views.rend());
        std::vector<std::vector<TokenId>> ri(ids.rbegin(), ids.rend());
        const auto gr = grouped_speculative_logits(m, rv, ri);
        for (std::size_t j = 0; j < rows.size(); ++j)
            CHECK(gr[j] == g[rows.size() - 1 - j]);
        ri[0] = {256};
        CHECK_THROWS_AS(grouped_speculative_logits(m, rv, ri), std::out_of_range);
        ri[0] = {};
        CHECK_THROWS_AS(grouped_speculative_logits(m, rv, ri), std::invalid_argument);
    }

    TEST_CASE("path exit is the conjunction of its nodes")
    {
        CHECK(hypertoken_exit_decision(std::vector<float>{0.9f, 0.9f}, 0.5f));
        CHECK_FALSE(hypertoken_exit_decision(std::vector<float>{0.9f, 0.4f}, 0.5f));
        for (float p : {0.2f, 0.5f, 0.51f, 0.9f})
            CHECK(hypertoken_exit_decision(std::vector<float>{p}, 0.5f) == decide_exit(p, 0.5f));
        CHECK_THROWS_AS(hypertoken_exit_decision(std::vector<float>{}, 0.5f), std::invalid_argument);
    }

    TEST_CASE("rearmost exit")
    {
        CHECK(rearmost_exit(std::vector<std::size_t>{22, 30}) == 30);
        CHECK(rearmost_exit(std::vector<std::size_t>{30, 22}) == 30);
        CHECK(rearmost_exit(std::vector<std::size_t>{7}) == 7);
    }

    TEST_CASE("tree attention reproduces each path run as a plain sequence")
    {
        const auto& m = small_target();
        const std::size_t d = m.config().hidden_dim;
        for (std::size_t start : {0u, 640u, 2222u}) {
            const auto ctx = slice(corpus(), start, 18);
            const auto tree = build_token_tree(small_draft(), ctx, std::vector<std::size_t>{2, 3, 1});
            const auto states = tree_hidden_states(m, ctx, tree);
            for (std::size_t n = 0; n < tree.nodes.size(); ++n) {
                const auto ref = per_layer_last_hidden(m, path_context(tree, ctx, n));
                for (std::size_t l = 0; l < states.size(); ++l)
                    CHECK(std::memcmp(states[l][n].data(), ref[l].data(), d * sizeof(float)) == 0);
            }
        }
    }

    TEST_CASE("path oracle is the max of per-node oracles")
    {
        const auto& m = small_target();
        SplitMix64 rng(91);
        for (int rep = 0; rep < 10; ++rep) {
            const auto ctx = slice(corpus(), rng.below(corpus().size() - 40), 16 + rng.below(10));
            std::vector<std::size_t> br(1 + rng.below(3));
            for (auto& b : br)
                b = 1 + rng.below(3);
            const auto tree = build_token_tree(small_draft(), ctx, br);
            for (const auto& path : enumerate_paths(tree)) {
                std::vector<std::size_t> node_exits;
                for (auto n : path)
                    node_exits.push_back(oracle_exit_layer(m, path_context(tree, ctx, n)));
                const auto e = hypertoken_oracle_exit(m, ctx, tree, path);
                CHECK(e == *std::max_element(node_exits.begin(), node_exits.end()));
                for (auto x : node_exits)
                    CHECK(e >= x);
            }
            const std::vector<std::size_t> one{tree.children(0)[0]};
            CHECK(hypertoken_oracle_exit(m, ctx, tree, one) ==
                  oracle_exit_layer(m, path_context(tree, ctx, one[0])));
        }
    }

    TEST_CASE("never-exit tree decoding equals greedy decoding")
    {
        const ConstantExitPredictor never(0.0f);
        for (const auto& br : {std::vector<std::size_t>{1}, std::vector<std::size_t>{2, 2},
                               std::vector<std::size_t>{3, 1, 2}}) {
            const auto prompt = slice(corpus(), 1200, 24);
            std::vector<TreeStepResult> steps;
            const auto out = tree_generate(small_target(), small_draft(), &never, nullptr, tree_config(br), prompt,
                                           40, &steps);
            CHECK(out == greedy_generate(small_target(), prompt, 40));
            for (const auto& s : steps) {
                CHECK(s.predictor_evaluations <= s.evaluation_bound());
                CHECK(s.exit_layer == 3);
            }
        }
    }

    TEST_CASE("always-exit tree decoding commits only verified tokens")
    {
        const ConstantExitPredictor always(1.0f);
        const auto prompt = slice(corpus(), 3000, 24);
        std::vector<TreeStepResult> steps;
        auto ctx = prompt;
        const auto out = tree_generate(small_target(), small_draft(), &always, nullptr, tree_config({2, 2}), prompt,
                                       30, &steps);
        for (const auto& s : steps) {
            CHECK(s.predictor_evaluations <= s.evaluation_bound());
            CHECK(s.num_paths == 4);
            CHECK(s.max_path_length == 3);
            // Each committed token is the target's argmax at the accepted exit layer.
            for (auto t : s.committed()) {
                CHECK(t == per_layer_argmax(small_target(), ctx)[s.exit_layer]);
                ctx.push_back(t);
            }
        }
        CHECK(out.size() == 30);
    }

    TEST_CASE("a draft identical to the target always accepts")
    {
        const ConstantExitPredictor never(0.0f);
        TreeEngine eng(small_target(), small_target(), &never, nullptr, tree_config({1}));
        eng.reset(slice(corpus(), 90, 20));
        for (int i = 0; i < 15; ++i)
            CHECK(eng.step().accepted_tokens.size() >= 1);
    }

    TEST_CASE("trace records and errors")
    {
        const ConstantExitPredictor never(0.0f);
        const auto s = tree_generate_step(small_target(), small_draft(), &never, nullptr, tree_config({2}),
                                          slice(corpus(), 0, 12));
        const auto line = format_tree_trace_record(s, std::vector<std::size_t>{2});
        CHECK(line.find("\"exit_layer\"") != std::string::npos);
        CHECK(line.find('\n') == std::string::npos);
        CHECK_THROWS_AS(TreeEngine(small_target(), small_draft(), nullptr, nullptr, tree_config({2})),
                        std::invalid_argument);
        CHECK_THROWS_AS(TreeEngine(small_target(), small_draft(), &never, nullptr, tree_config({})),
                        std::invalid_argument);
    }
}
