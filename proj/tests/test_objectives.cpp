#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <flame/flame.hpp>

#include "support/fd_check.hpp"

using Catch::Approx;
using flame::Tape;
using flame::Tensor;

namespace {

Tensor<double> leaf(const std::vector<int>& shape, const std::vector<double>& v) {
    Tensor<double> t = Tensor<double>::from(shape, v);
    t.set_requires_grad(true);
    return t;
}

flame::RepresentationBundle<double> bundle_of(const std::vector<Tensor<double>>& reps) {
    flame::RepresentationBundle<double> b;
    const int m = static_cast<int>(std::log2(static_cast<double>(reps.size())) + 0.5);
    b.paths = flame::enumerate_paths(m);
    b.reps = reps;
    return b;
}

Tensor<double> random_rep(std::uint64_t seed, int bsz, int d) {
    flame::Rng rng(seed);
    std::vector<double> v(static_cast<std::size_t>(bsz) * d);
    for (double& x : v) x = rng.next_uniform(-1.0, 1.0);
    return Tensor<double>::from({bsz, d}, v);
}

}  // namespace

TEST_CASE("rec_loss equals cross entropy over the item scores") {
    Tape<double>* nt = nullptr;
    auto table = leaf({4, 2}, {0, 0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0});  // padding + 3 items
    auto h = Tensor<double>::from({2, 2}, {2.0, -1.0, 0.5, 0.5});

    auto loss = flame::rec_loss(h, table, {1, 3}, nt);
    // manual: scores = h . items^T over items 1..3
    double expect = 0;
    {
        const double s0[3] = {2.0, -1.0, 1.0};
        const double s1[3] = {0.5, 0.5, 1.0};
        double l0 = std::log(std::exp(s0[0]) + std::exp(s0[1]) + std::exp(s0[2])) - s0[0];
        double l1 = std::log(std::exp(s1[0]) + std::exp(s1[1]) + std::exp(s1[2])) - s1[2];
        expect = (l0 + l1) / 2.0;
    }
    REQUIRE(loss.item() == Approx(expect).epsilon(1e-12));

    REQUIRE_THROWS_AS(flame::rec_loss(h, table, {0, 1}, nt), flame::ContractError);
    REQUIRE_THROWS_AS(flame::rec_loss(h, table, {1, 4}, nt), flame::ContractError);
}

TEST_CASE("directional NCE is ln B at indistinguishable similarity") {
    Tape<double>* nt = nullptr;
    auto h_p = random_rep(1, 4, 3);
    auto zero = Tensor<double>::zeros({4, 3});
    REQUIRE(flame::nce_loss_directional(h_p, zero, 1.0, nt).item() ==
            Approx(std::log(4.0)).epsilon(1e-12));
    REQUIRE(flame::nce_loss(h_p, zero, 1.0, nt).item() ==
            Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("NCE rewards aligned pairs and respects temperature") {
    Tape<double>* nt = nullptr;
    // strongly diagonal similarity: identical, well-separated rows
    auto h = Tensor<double>::from({3, 2}, {5, 0, 0, 5, -5, -5});
    const double aligned = flame::nce_loss(h, h, 1.0, nt).item();
    REQUIRE(aligned < std::log(3.0));

    // higher temperature flattens the softmax toward ln B
    const double hot = flame::nce_loss(h, h, 50.0, nt).item();
    REQUIRE(hot > aligned);
    REQUIRE(hot < std::log(3.0) + 1e-6);

    // symmetrized form is order invariant
    auto other = random_rep(2, 3, 2);
    REQUIRE(flame::nce_loss(h, other, 0.7, nt).item() ==
            flame::nce_loss(other, h, 0.7, nt).item());

    REQUIRE_THROWS_AS(flame::nce_loss(h, other, 0.0, nt), flame::ContractError);
    REQUIRE_THROWS_AS(flame::nce_loss(h, other, -1.0, nt), flame::ContractError);
    auto single = Tensor<double>::from({1, 2}, {1.0, 2.0});
    REQUIRE_THROWS_AS(flame::nce_loss(single, single, 1.0, nt), flame::ContractError);
}

TEST_CASE("pair_similarity is the batch-mean dot product") {
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
    REQUIRE(flame::pair_similarity(a, b) == Approx((17.0 + 53.0) / 2.0).epsilon(1e-15));
    REQUIRE_THROWS_AS(flame::pair_similarity(a, Tensor<double>::zeros({3, 2})),
                      flame::ShapeError);
}

TEST_CASE("pair weights normalize and favor dissimilar pairs") {
    flame::PairWeightTable t;
    t.pairs = {{0, 1}, {0, 2}, {1, 2}};
    t.similarity = {3.0, -1.0, 0.5};
    flame::fill_softmax_weights(t);
    double sum = 0;
    for (double w : t.weight) sum += w;
    REQUIRE(sum == Approx(1.0).margin(1e-12));
    REQUIRE(t.weight[1] > t.weight[2]);  // least similar gets most weight
    REQUIRE(t.weight[2] > t.weight[0]);
    // closed form: softmax of (-3, 1, -0.5) with max shift 1
    const double e0 = std::exp(-3.0 - 1.0), e1 = std::exp(1.0 - 1.0), e2 = std::exp(-0.5 - 1.0);
    REQUIRE(t.weight[0] == Approx(e0 / (e0 + e1 + e2)).epsilon(1e-12));

    flame::PairWeightTable u;
    u.pairs = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
    u.similarity.assign(6, 0.25);
    flame::fill_softmax_weights(u);
    for (double w : u.weight) REQUIRE(w == 1.0 / 6.0);  // exact
}

TEST_CASE("pair_weights covers every unordered pair once") {
    std::vector<Tensor<double>> reps;
    for (int i = 0; i < 4; ++i) reps.push_back(random_rep(10 + static_cast<std::uint64_t>(i), 3, 2));
    auto bundle = bundle_of(reps);
    auto table = flame::pair_weights(bundle);
    REQUIRE(table.size() == 6);
    REQUIRE(table.pairs[0] == std::make_pair<std::size_t, std::size_t>(0, 1));
    REQUIRE(table.pairs[5] == std::make_pair<std::size_t, std::size_t>(2, 3));
    for (std::size_t i = 0; i < 6; ++i)
        REQUIRE(table.similarity[i] ==
                Approx(flame::pair_similarity(reps[table.pairs[i].first],
                                              reps[table.pairs[i].second]))
                    .epsilon(1e-15));
}

TEST_CASE("weighted alignment equals a manual weighted sum") {
    Tape<double>* nt = nullptr;
    std::vector<Tensor<double>> reps;
    for (int i = 0; i < 4; ++i) reps.push_back(random_rep(20 + static_cast<std::uint64_t>(i), 3, 2));
    auto bundle = bundle_of(reps);
    flame::PairWeightTable table;
    auto loss = flame::mkt_loss(bundle, 0.8, nt, &table);

    double manual = 0;
    for (std::size_t i = 0; i < table.size(); ++i)
        manual += table.weight[i] * flame::nce_loss(reps[table.pairs[i].first],
                                                    reps[table.pairs[i].second], 0.8, nt)
                                        .item();
    REQUIRE(loss.item() == Approx(manual).epsilon(1e-12));
}

TEST_CASE("conventional alignment is the unweighted pair sum") {
    Tape<double>* nt = nullptr;
    auto a = random_rep(31, 3, 2);
    auto b = random_rep(32, 3, 2);
    auto c = random_rep(33, 3, 2);
    const double two = flame::conventional_mkt<double>({a, b}, 1.0, nt).item();
    REQUIRE(two == Approx(flame::nce_loss(a, b, 1.0, nt).item()).epsilon(1e-15));
    const double three = flame::conventional_mkt<double>({a, b, c}, 1.0, nt).item();
    const double expect = flame::nce_loss(a, b, 1.0, nt).item() +
                          flame::nce_loss(a, c, 1.0, nt).item() +
                          flame::nce_loss(b, c, 1.0, nt).item();
    REQUIRE(three == Approx(expect).epsilon(1e-12));
    REQUIRE_THROWS_AS(flame::conventional_mkt<double>({a}, 1.0, nt), flame::ContractError);
}

TEST_CASE("equal similarities collapse weighting to the uniform average") {
    Tape<double>* nt = nullptr;
    // identical representations: every pair has the same similarity and loss
    auto r = random_rep(41, 4, 3);
    std::vector<Tensor<double>> reps{r, r, r, r};
    auto bundle = bundle_of(reps);
    auto weighted = flame::mkt_loss(bundle, 1.0, nt);
    auto uniform = flame::cl_loss(bundle, 1.0, nt);
    REQUIRE(uniform.item() == Approx(6.0 * weighted.item()).epsilon(1e-12));
}

TEST_CASE("anneal endpoints are exact and the midpoint is geometric") {
    flame::AnnealSchedule s{0.1, 1e-5, 200};
    REQUIRE(flame::anneal(0, s) == 0.1);
    REQUIRE(flame::anneal(200, s) == 1e-5);
    REQUIRE(flame::anneal(500, s) == 1e-5);
    const double mid = flame::anneal(100, s);
    REQUIRE(std::abs(mid - std::sqrt(0.1 * 1e-5)) / std::sqrt(0.1 * 1e-5) < 1e-12);
    // strictly decreasing when lambda0 > lambdaR
    double prev = flame::anneal(0, s);
    for (int r = 1; r <= 200; r += 7) {
        const double cur = flame::anneal(r, s);
        REQUIRE(cur < prev);
        prev = cur;
    }
    REQUIRE_THROWS_AS(flame::anneal(-1, s), flame::ContractError);

    flame::AnnealSchedule off{0.0, 0.0, 50};
    REQUIRE_NOTHROW(off.validate());
    REQUIRE(flame::anneal(0, off) == 0.0);
    REQUIRE(flame::anneal(25, off) == 0.0);

    flame::AnnealSchedule mixed{0.1, 0.0, 50};
    REQUIRE_THROWS_AS(mixed.validate(), flame::ConfigError);
    flame::AnnealSchedule negative{-0.1, 1e-5, 50};
    REQUIRE_THROWS_AS(negative.validate(), flame::ConfigError);
    flame::AnnealSchedule no_rounds{0.1, 1e-5, 0};
    REQUIRE_THROWS_AS(no_rounds.validate(), flame::ConfigError);
}

TEST_CASE("total_loss is affine in lambda") {
    Tape<double>* nt = nullptr;
    auto rec = Tensor<double>::scalar(2.0);
    auto mkt = Tensor<double>::scalar(0.5);
    REQUIRE(flame::total_loss(rec, mkt, 0.0, nt).item() == 2.0);
    REQUIRE(flame::total_loss(rec, mkt, 0.1, nt).item() == Approx(2.05).epsilon(1e-15));
    REQUIRE(flame::total_loss(rec, mkt, 2.0, nt).item() == Approx(3.0).epsilon(1e-15));
    REQUIRE_THROWS_AS(flame::total_loss(rec, mkt, -0.5, nt), flame::ContractError);
}

TEST_CASE("alignment losses pass finite differences") {
    SECTION("symmetrized NCE") {
        auto h_p = random_rep(51, 4, 3);
        auto h_q = random_rep(52, 4, 3);
        h_p.set_requires_grad(true);
        h_q.set_requires_grad(true);
        auto rep = testsupport::fd_check(
            {{"h_p", &h_p}, {"h_q", &h_q}},
            [&](Tape<double>* tape) { return flame::nce_loss(h_p, h_q, 0.7, tape); });
        INFO("worst " << rep.worst);
        REQUIRE(rep.max_rel_err < 1e-6);
    }
    SECTION("weighted alignment with frozen weights") {
        std::vector<Tensor<double>> reps;
        for (int i = 0; i < 4; ++i) {
            reps.push_back(random_rep(60 + static_cast<std::uint64_t>(i), 3, 2));
            reps.back().set_requires_grad(true);
        }
        auto bundle = bundle_of(reps);
        const auto table = [&] {
            flame::PairWeightTable t;
            flame::mkt_loss(bundle, 1.0, (Tape<double>*)nullptr, &t);
            return t;
        }();
        auto rep = testsupport::fd_check(
            {{"r0", &reps[0]}, {"r1", &reps[1]}, {"r2", &reps[2]}, {"r3", &reps[3]}},
            [&](Tape<double>* tape) { return flame::mkt_loss_weighted(bundle, table, 1.0, tape); });
        INFO("worst " << rep.worst);
        REQUIRE(rep.max_rel_err < 1e-6);
    }
}
