#include <doctest.h>

#include <random>

#include "rubricmem/errors.hpp"
#include "rubricmem/verify.hpp"
#include "support.hpp"

using namespace rubricmem;
using namespace rubricmem::verify;

namespace {

const Query kQuery{"q1", "question", Split::tuning};

CandidatePool pool_of(std::initializer_list<const char*> texts) {
    CandidatePool p{"q1", 0, {}};
    for (const char* t : texts) p.candidates.push_back({"q1", t, Origin::base, 0});
    return p;
}

Rubric rubric_of(std::initializer_list<std::pair<const char*, double>> items) {
    Rubric r{"q1", {}, std::nullopt};
    for (auto [c, w] : items) r.items.push_back({c, w});
    return r;
}

}  // namespace

TEST_SUITE("verify") {

TEST_CASE("traces: population std and binary repetition count") {
    const auto t = make_trace("q", "d", canonicalize("c"), {1.0, 0.0});
    CHECK(t.mean == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(t.std == doctest::Approx(0.5).epsilon(1e-12));

    auto v = std::make_shared<support::TableVerifier>();
    v->set("x", "c", {1.0});
    Scorer scalar(v, {VerifierMode::scalar, 3, 2});
    const auto det = scalar.score_item(kQuery, "x", "c", 3);
    CHECK(det.repetitions.size() == 3);
    CHECK(det.std == 0.0);

    Scorer binary(v, {VerifierMode::binary, 5, 2});
    CHECK(binary.effective_repetitions(5) == 1);
    CHECK(binary.score_item(kQuery, "x", "c", 5).repetitions.size() == 1);
    CHECK_THROWS_AS(make_trace("q", "d", canonicalize("c"), {}), Error);
}

TEST_CASE("item reward examples") {
    auto v = std::make_shared<support::TableVerifier>();
    v->set("ref", "c", {1.0});
    v->set("o3", "c", {0.5});
    v->set("o4", "c", {0.5});
    Scorer s(v, {VerifierMode::scalar, 3, 4});
    const ReferenceAnswer ref{"q1", "ref"};
    const auto rec = s.item_reward(kQuery, ref, pool_of({"o1", "o2", "o3", "o4"}), "c", 3);
    CHECK(rec.gap == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(rec.sigma == 0.0);
    CHECK(rec.alpha == doctest::Approx(0.75).epsilon(1e-12));

    // No discrimination.
    v->set("o1", "same", {0.4});
    v->set("o2", "same", {0.4});
    v->set("ref", "same", {0.4});
    const auto flat = s.item_reward(kQuery, ref, pool_of({"o1", "o2"}), "same", 3);
    CHECK(flat.gap == 0.0);
    CHECK(flat.alpha <= 0.0);

    // Anti-aligned criterion.
    v->set("o1", "anti", {1.0});
    v->set("o2", "anti", {1.0});
    CHECK(s.item_reward(kQuery, ref, pool_of({"o1", "o2"}), "anti", 3).gap == doctest::Approx(-1.0));
}

TEST_CASE("sigma averages trace std over reference and candidates") {
    // ref std 0.5, candidate stds 0 and 0.5 -> sigma = (0.5 + 0 + 0.5) / 3.
    auto v = std::make_shared<support::TableVerifier>();
    v->set("ref", "c", {1.0, 0.0});
    v->set("o1", "c", {0.0});
    v->set("o2", "c", {1.0, 0.0});
    Scorer s(v, {VerifierMode::scalar, 2, 1});
    const auto rec = s.item_reward(kQuery, {"q1", "ref"}, pool_of({"o1", "o2"}), "c", 2);
    CHECK(rec.gap == doctest::Approx(0.5 - 0.25));
    CHECK(rec.sigma == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(rec.alpha == doctest::Approx(0.25 - 1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("rubric gap examples") {
    const auto sym = rubric_of({{"a", 0.5}, {"b", 0.5}});
    const std::vector<double> g1{1.0, -1.0};
    CHECK(rubric_gap(sym, g1) == 0.0);
    const std::vector<double> g2{0.37};
    CHECK(rubric_gap(rubric_of({{"a", 1.0}}), g2) == doctest::Approx(0.37));
    const std::vector<double> g3{0.5, 0.0};
    CHECK(std::abs(rubric_gap(rubric_of({{"a", 0.6}, {"b", 0.4}}), g3) - 0.3) <= 1e-9);
    CHECK_THROWS_AS(rubric_gap(sym, g2), Error);
}

TEST_CASE("rubric score examples") {
    auto v = std::make_shared<support::TableVerifier>();
    v->set("ans", "a", {1.0});
    v->set("ans", "b", {0.0});
    v->set("full", "a", {1.0});
    v->set("full", "b", {1.0});
    Scorer s(v, {VerifierMode::binary, 1, 2});
    const auto r = rubric_of({{"a", 0.6}, {"b", 0.4}});
    CHECK(std::abs(s.rubric_score_value(kQuery, "ans", r, 1) - 0.6) <= 1e-9);
    CHECK(std::abs(s.rubric_score_value(kQuery, "full", r, 1) - 1.0) <= 1e-9);
    CHECK(s.rubric_score_value(kQuery, "none", r, 1) == 0.0);
}

TEST_CASE("preference outcome and accuracy examples") {
    CHECK(preference_outcome(1.0, 0.0) == 1.0);
    CHECK(preference_outcome(0.7, 0.7) == 0.5);
    CHECK(preference_outcome(0.2, 0.9) == 0.0);

    auto v = std::make_shared<support::TableVerifier>();
    // outcomes [1, 0.5, 0] under weights [0.5, 0.3, 0.2]
    v->set("ref", "a", {1.0});
    v->set("ref", "b", {0.5});
    v->set("cand", "b", {0.5});
    v->set("cand", "c", {1.0});
    Scorer s(v, {VerifierMode::scalar, 1, 2});
    const auto r = rubric_of({{"a", 0.5}, {"b", 0.3}, {"c", 0.2}});
    const ReferenceAnswer ref{"q1", "ref"};
    CHECK(std::abs(s.preference_accuracy(kQuery, ref, "cand", r, 1) - 0.65) <= 1e-9);
    CHECK(std::abs(s.preference_accuracy(kQuery, ref, "ref", r, 1) - 0.5) <= 1e-9);
    v->set("ref", "c", {1.0});
    Scorer fresh(v, {VerifierMode::scalar, 1, 2});
    CHECK(std::abs(fresh.preference_accuracy(kQuery, ref, "nothing", r, 1) - 1.0) <= 1e-9);
}

TEST_CASE("linearity: rubric gap equals score(ref) minus mean candidate score") {
    auto world = support::bundled_world("w1");
    auto backend = testbed::SyntheticBackend::create(world);
    std::mt19937_64 rng(3);
    const auto preds = testbed::all_predicates(*world);
    const auto full = (testbed::AttrSet{1} << world->size()) - 1;
    for (int trial = 0; trial < 50; ++trial) {
        Scorer s(backend, {VerifierMode::binary, 1, 4});
        const ReferenceAnswer ref{"q1", world->render(rng() & full)};
        CandidatePool pool{"q1", 0, {}};
        for (int j = 0; j < 4; ++j) pool.candidates.push_back({"q1", world->render(rng() & full), Origin::base, 0});
        std::vector<RubricItem> raw;
        for (int k = 0; k < 5; ++k) raw.push_back({testbed::predicate_text(*world, preds[rng() % preds.size()]),
                                                    static_cast<double>(1 + rng() % 9)});
        const auto rubric = make_rubric("q1", raw);
        std::vector<std::string> criteria;
        for (const auto& i : rubric.items) criteria.push_back(i.criterion);
        const auto recs = s.item_rewards(kQuery, ref, pool, criteria, 1);
        std::vector<double> gaps;
        for (const auto& r : recs) gaps.push_back(r.gap);
        double cand_mean = 0.0;
        for (const auto& c : pool.candidates) cand_mean += s.rubric_score_value(kQuery, c.text, rubric, 1);
        cand_mean /= 4.0;
        const double lhs = rubric_gap(rubric, gaps);
        const double rhs = s.rubric_score_value(kQuery, ref.text, rubric, 1) - cand_mean;
        CHECK(std::abs(lhs - rhs) <= 1e-12);
    }
}

TEST_CASE("scorer caches evaluations across calls") {
    auto v = std::make_shared<support::TableVerifier>();
    v->set("ref", "a", {1.0});
    Scorer s(v, {VerifierMode::scalar, 3, 2});
    const auto r = rubric_of({{"a", 1.0}});
    s.rubric_score_value(kQuery, "ref", r, 3);
    const int calls = v->calls;
    CHECK(calls == 3);
    s.rubric_score_value(kQuery, "ref", r, 3);
    CHECK(v->calls == calls);
    CHECK(s.cache_size() == 3);
}

}  // TEST_SUITE
