#include "test_util.hpp"

#include "specee/speculation.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

using namespace specee;
using namespace testutil;

namespace {

// Full sort of every logit, lower id first on ties.
std::vector<TokenId> sort_oracle(const std::vector<float>& logits, std::size_t k)
{
    std::vector<TokenId> ids(logits.size());
    std::iota(ids.begin(), ids.end(), 0u);
    std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
    ids.resize(k);
    return ids;
}

std::vector<float> draft_logits(const TransformerModel& draft, const std::vector<TokenId>& ctx)
{
    const auto h = per_layer_last_hidden(draft, ctx).back();
    return full_head_logits(draft, h);
}

}  // namespace

TEST_SUITE("speculation")
{
    TEST_CASE("k equal to vocab gives a permutation")
    {
        const auto s = propose_topk(small_draft(), slice(corpus(), 0, 20), 256);
        std::set<TokenId> seen(s.tokens.begin(), s.tokens.end());
        CHECK(seen.size() == 256);
        CHECK(*seen.rbegin() == 255);
        for (std::size_t i = 1; i < s.size(); ++i)
            CHECK(s.draft_probs[i - 1] >= s.draft_probs[i]);
    }

    TEST_CASE("ties rank the lower id first")
    {
        std::vector<float> logits(10, 0.0f);
        logits[7] = 2.0f;
        logits[3] = 2.0f;
        logits[5] = 1.0f;
        const auto s = topk_from_logits(logits, 3);
        CHECK(s.tokens == std::vector<TokenId>{3, 7, 5});
        CHECK(s.draft_probs[0] == s.draft_probs[1]);
        CHECK_THROWS_AS(topk_from_logits(logits, 0), std::invalid_argument);
        CHECK_THROWS_AS(topk_from_logits(logits, 11), std::invalid_argument);
    }

    TEST_CASE("top-4 on the trained draft matches a full-sort oracle")
    {
        const auto& d = small_draft();
        for (std::size_t start = 0; start < 2000; start += 97) {
            const auto ctx = slice(corpus(), start, 25);
            const auto s = propose_topk(d, ctx, 4);
            const auto logits = draft_logits(d, ctx);
            CHECK(s.tokens == sort_oracle(logits, 4));
            double z = 0, mx = *std::max_element(logits.begin(), logits.end());
            for (float v : logits)
                z += std::exp(v - mx);
            CHECK(close_rel(s.draft_probs[0], std::exp(logits[s.tokens[0]] - mx) / z, 1e-6));
        }
    }

    TEST_CASE("incremental drafter equals propose_topk")
    {
        const auto& d = small_draft();
        Drafter dr(d);
        std::vector<TokenId> ctx = slice(corpus(), 50, 10);
        for (std::size_t i = 0; i < 30; ++i) {
            const auto a = dr.propose(ctx, 4);
            CHECK(a.tokens == propose_topk(d, ctx, 4).tokens);
            ctx.push_back(corpus()[60 + i]);
        }
        // A context that is not an extension restarts the drafter.
        const auto other = slice(corpus(), 900, 12);
        CHECK(dr.propose(other, 4).tokens == propose_topk(d, other, 4).tokens);
    }

    TEST_CASE("tree shape for branching 3,1")
    {
        const auto t = build_token_tree(small_draft(), slice(corpus(), 0, 16), std::vector<std::size_t>{3, 1});
        REQUIRE(t.nodes.size() == 1 + 3 + 3);
        CHECK(t.children(0).size() == 3);
        for (auto c : t.children(0)) {
            CHECK(t.nodes[c].depth == 1);
            CHECK(t.children(c).size() == 1);
            CHECK(t.is_leaf(t.children(c)[0]));
        }
    }

    TEST_CASE("branching 1 reduces to top-1")
    {
        const auto ctx = slice(corpus(), 400, 16);
        const auto t = build_token_tree(small_draft(), ctx, std::vector<std::size_t>{1});
        REQUIRE(t.nodes.size() == 2);
        CHECK(t.nodes[0].token == ctx.back());
        CHECK(t.nodes[1].token == propose_topk(small_draft(), ctx, 1).tokens[0]);
    }

    TEST_CASE("every node's children equal an independent top-k of its path")
    {
        const auto ctx = slice(corpus(), 1234, 20);
        const std::vector<std::size_t> br{3, 2, 2};
        const auto t = build_token_tree(small_draft(), ctx, br);
        CHECK(t.nodes.size() == 1 + 3 + 6 + 12);
        for (std::size_t n = 0; n < t.nodes.size(); ++n) {
            if (t.is_leaf(n))
                continue;
            std::vector<TokenId> kids;
            for (auto c : t.children(n))
                kids.push_back(t.nodes[c].token);
            CHECK(kids == propose_topk(small_draft(), path_context(t, ctx, n), br[t.nodes[n].depth]).tokens);
        }
    }

    TEST_CASE("path enumeration counts")
    {
        const auto ctx = slice(corpus(), 0, 10);
        const auto p32 = enumerate_paths(build_token_tree(small_draft(), ctx, std::vector<std::size_t>{3, 2}));
        CHECK(p32.size() == 6);
        for (const auto& p : p32)
            CHECK(p.size() == 2);
        const auto p111 = enumerate_paths(build_token_tree(small_draft(), ctx, std::vector<std::size_t>{1, 1, 1}));
        REQUIRE(p111.size() == 1);
        CHECK(p111[0].size() == 3);
    }
}
