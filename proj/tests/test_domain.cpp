#include <doctest.h>

#include <cmath>
#include <random>

#include "rubricmem/digest.hpp"
#include "rubricmem/domain.hpp"
#include "rubricmem/errors.hpp"

using namespace rubricmem;

namespace {

std::vector<RubricItem> items(std::initializer_list<double> ws) {
    std::vector<RubricItem> out;
    int i = 0;
    for (double w : ws) out.push_back({"c" + std::to_string(i++), w});
    return out;
}

std::vector<double> weights(const std::vector<RubricItem>& v) {
    std::vector<double> out;
    for (const auto& i : v) out.push_back(i.weight);
    return out;
}

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an Error");
    return Errc::io;
}

}  // namespace

TEST_SUITE("domain") {

TEST_CASE("normalize_weights examples") {
    CHECK(weights(normalize_weights(items({2.0, 2.0}))) == std::vector<double>{0.5, 0.5});
    CHECK(weights(normalize_weights(items({1.0}))) == std::vector<double>{1.0});
    const auto w = weights(normalize_weights(items({0.6, 0.3, 0.3})));
    REQUIRE(w.size() == 3);
    CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(w[2] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("normalize_weights errors") {
    CHECK(code_of([] { normalize_weights({}); }) == Errc::empty_rubric);
    CHECK(code_of([] { normalize_weights(items({0.0, 0.0})); }) == Errc::degenerate_weights);
    CHECK(code_of([] { normalize_weights(items({1.0, -0.1})); }) == Errc::precondition);
    CHECK(code_of([] { normalize_weights(items({1.0, NAN})); }) == Errc::precondition);
}

TEST_CASE("normalize_weights is scale invariant and sums to one") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> w(0.0, 5.0), scale(0.01, 100.0);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<RubricItem> v;
        const int k = 1 + static_cast<int>(rng() % 30);
        for (int i = 0; i < k; ++i) v.push_back({"c" + std::to_string(i), w(rng)});
        v[0].weight += 0.01;
        auto scaled = v;
        const double c = scale(rng);
        for (auto& i : scaled) i.weight *= c;
        const auto a = normalize_weights(v);
        const auto b = normalize_weights(scaled);
        double sum = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].weight == doctest::Approx(b[i].weight).epsilon(1e-12));
            CHECK(a[i].criterion == v[i].criterion);
            sum += a[i].weight;
        }
        CHECK(std::abs(sum - 1.0) <= kWeightSumTolerance);
    }
}

TEST_CASE("canonicalize examples") {
    CHECK(canonicalize("Avoids markdown formatting.").canonical == "avoids markdown formatting");
    CHECK(canonicalize("  avoids   MARKDOWN formatting ").canonical == "avoids markdown formatting");
    CHECK(canonicalize("States the answer first.") == canonicalize("States the answer first"));
    CHECK(code_of([] { canonicalize("  ...  "); }) == Errc::empty_criterion);
    CHECK(code_of([] { canonicalize(""); }) == Errc::empty_criterion);
}

TEST_CASE("canonicalize is idempotent") {
    const std::string alphabet = "aBc .,;!?\t\n-:xYz";
    std::mt19937_64 rng(5);
    int checked = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        std::string s;
        const int len = static_cast<int>(rng() % 24);
        for (int i = 0; i < len; ++i) s += alphabet[rng() % alphabet.size()];
        CriterionKey once;
        try {
            once = canonicalize(s);
        } catch (const Error& e) {
            CHECK(e.code() == Errc::empty_criterion);
            continue;
        }
        CHECK(canonicalize(once.canonical) == once);
        ++checked;
    }
    CHECK(checked > 1000);
}

TEST_CASE("make_rubric merges duplicates, truncates and falls back to uniform") {
    const std::vector<RubricItem> raw{{"Cites sources.", 1.0}, {"is concise", 1.0}, {"cites sources", 2.0}};
    const auto r = make_rubric("q", raw);
    REQUIRE(r.items.size() == 2);
    CHECK(r.items[0].criterion == "Cites sources.");
    CHECK(r.items[0].weight == doctest::Approx(0.75));
    CHECK(r.items[1].weight == doctest::Approx(0.25));

    std::vector<RubricItem> many;
    for (int i = 0; i < 40; ++i) many.push_back({"item " + std::to_string(i), 1.0});
    CHECK(make_rubric("q", many).items.size() == kDefaultMaxRubricItems);
    CHECK(make_rubric("q", many, 3).items.size() == 3);

    const auto zero = make_rubric("q", items({0.0, 0.0, 0.0, 0.0}));
    for (const auto& i : zero.items) CHECK(i.weight == doctest::Approx(0.25));
    CHECK(code_of([] { make_rubric("q", {}); }) == Errc::empty_rubric);
}

TEST_CASE("json round trips and rejects unknown enum names") {
    const Rubric r = make_rubric("q7", items({3.0, 1.0}), 30, Provenance{ProposalMode::contrastive, 12});
    CHECK(nlohmann::json(r).get<Rubric>() == r);
    const CandidatePool pool{"q7", 2, {{"q7", "text", Origin::adversarial, 2}, {"q7", "b", Origin::base, 0}}};
    CHECK(nlohmann::json(pool).get<CandidatePool>() == pool);
    const Query q{"q7", "what?", Split::evaluation};
    CHECK(nlohmann::json(q).get<Query>() == q);
    CHECK(code_of([] { nlohmann::json("sideways").get<Split>(); }) == Errc::data);
}

}  // TEST_SUITE

TEST_SUITE("digest") {

TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
    CHECK(hex_digest(0xabcULL) == "0000000000000abc");
}

TEST_CASE("part boundaries matter") {
    CHECK(fnv1a64_parts({"ab", "c"}) != fnv1a64_parts({"a", "bc"}));
    CHECK(derive_seed(1, {"x", "y"}) == derive_seed(1, {"x", "y"}));
    CHECK(derive_seed(1, {"x", "y"}) != derive_seed(2, {"x", "y"}));
    CHECK(derive_seed(1, {"x", "y"}) != derive_seed(1, {"xy"}));
}

TEST_CASE("splitmix64 reference stream and ranges") {
    // First outputs for seed 0 from the reference implementation.
    SplitMix64 g(0);
    CHECK(g() == 0xe220a8397b1dcdafULL);
    CHECK(g() == 0x6e789e6aa1b965f4ULL);
    SplitMix64 h(42);
    for (int i = 0; i < 10000; ++i) {
        const double u = h.uniform();
        CHECK((u >= 0.0 && u < 1.0));
        CHECK(h.below(7) < 7);
    }
}

}  // TEST_SUITE
