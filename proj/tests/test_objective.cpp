#include "test_support.hpp"

#include <functional>

#include "memwarp/fieldops.hpp"
#include "memwarp/objective.hpp"
#include "oracles.hpp"

using namespace memwarp;
namespace obj = memwarp::objective;

namespace {

torch::Tensor onehot(const torch::Tensor& labels, int n) {
    return torch::one_hot(labels, n).permute({3, 0, 1, 2}).unsqueeze(0).to(torch::kFloat64);
}

torch::Tensor linear_field(int64_t n, double alpha) {
    auto u = torch::zeros({1, 3, n, n, n}, torch::kFloat64);
    auto r = alpha * torch::arange(n, torch::kFloat64);
    u[0][0] = r.view({n, 1, 1}).expand({n, n, n});
    u[0][1] = r.view({1, n, 1}).expand({n, n, n});
    u[0][2] = r.view({1, 1, n}).expand({n, n, n});
    return u;
}

} // namespace

TEST_CASE("similarity_mse") {
    auto a = torch::rand({1, 1, 4, 4, 4}, torch::kFloat64);
    CHECK(obj::similarity_mse(a, a).item<double>() == 0.0);
    CHECK(obj::similarity_mse(a, a + 0.5).item<double>() == doctest::Approx(0.25).epsilon(1e-12));
    auto b = torch::rand({1, 1, 4, 4, 4}, torch::kFloat64);
    CHECK(obj::similarity_mse(a, b).item<double>() == obj::similarity_mse(b, a).item<double>());
    CHECK_THROWS_AS(obj::similarity_mse(a, torch::rand({1, 1, 4, 4, 3})), ContractError);
}

TEST_CASE("dice_loss") {
    const GridShape g{10, 10, 10};
    auto cube = oracle::cube({10, 10, 10}, {2, 2, 2}, 4);
    auto shifted = oracle::cube({10, 10, 10}, {4, 2, 2}, 4);
    auto id = DisplacementField{torch::zeros({3, 10, 10, 10}, torch::kFloat64)};
    const LabelVolume a{cube, 2}, b{shifted, 2};
    CHECK(obj::dice_loss(a, a, id).item<double>() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(obj::dice_loss(a, b, id).item<double>() == doctest::Approx(0.5).epsilon(1e-6));
    const LabelVolume disjoint{oracle::cube({10, 10, 10}, {6, 6, 6}, 4), 2};
    CHECK(obj::dice_loss(a, disjoint, id).item<double>() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(obj::dice_loss(a, LabelVolume{shifted, 3}, id), ContractError);
    // A 2-voxel pull along axis 0 moves the shifted cube back onto the original.
    auto back = torch::zeros({3, 10, 10, 10}, torch::kFloat64);
    back[0].fill_(2.0);
    CHECK(obj::dice_loss(a, b, DisplacementField{back}).item<double>() < 1e-6);
}

TEST_CASE("soft dice ignores the background and is permutation invariant") {
    torch::manual_seed(30);
    auto p = torch::softmax(torch::randn({2, 4, 5, 5, 5}, torch::kFloat64), 1);
    auto q = onehot(torch::randint(0, 4, {5, 5, 5}, torch::kInt64), 4).expand({2, 4, 5, 5, 5});
    // Oracle: 1 - mean over samples and classes 1..3.
    double acc = 0.0;
    for (int b = 0; b < 2; ++b) {
        for (int k = 1; k < 4; ++k) {
            const double inter = (p[b][k] * q[b][k]).sum().item<double>();
            const double den = p[b][k].sum().item<double>() + q[b][k].sum().item<double>();
            acc += (2 * inter + obj::kDiceEpsilon) / (den + obj::kDiceEpsilon);
        }
    }
    CHECK(obj::soft_dice_loss(p, q).item<double>() == doctest::Approx(1.0 - acc / 6.0).epsilon(1e-12));
    auto perm = torch::tensor({0, 3, 1, 2}, torch::kInt64);
    CHECK(obj::soft_dice_loss(p.index_select(1, perm), q.index_select(1, perm)).item<double>() ==
          doctest::Approx(obj::soft_dice_loss(p, q).item<double>()).epsilon(1e-12));
}

TEST_CASE("smoothness_reg") {
    CHECK(obj::smoothness_reg(torch::zeros({1, 3, 5, 5, 5})).item<double>() == 0.0);
    CHECK(obj::smoothness_reg(torch::full({1, 3, 5, 5, 5}, 0.7)).item<double>() == 0.0);
    for (double alpha : {0.1, -0.3, 2.0}) {
        auto u = linear_field(6, alpha);
        CHECK(obj::smoothness_reg(u).item<double>() == doctest::Approx(3 * alpha * alpha).epsilon(1e-12));
        CHECK(obj::smoothness_reg(u + 4.0).item<double>() == doctest::Approx(3 * alpha * alpha).epsilon(1e-12));
    }
}

TEST_CASE("region_loss") {
    CHECK(obj::LossWeights::region_weight(1) == 1.0);
    CHECK(obj::LossWeights::region_weight(2) == 0.5);
    CHECK(obj::LossWeights::region_weight(3) == 0.25);

    SUBCASE("correct maps at every level give zero") {
        // A single label is reproduced exactly by upsampling.
        auto uniform = torch::full({8, 8, 2}, 2, torch::kInt64);
        auto target = onehot(uniform, 3);
        auto l2 = onehot(torch::full({4, 4, 1}, 2, torch::kInt64), 3);
        auto l3 = onehot(torch::full({2, 2, 1}, 2, torch::kInt64), 3);
        CHECK(obj::region_loss({target, l2, l3}, target).item<double>() < 1e-9);
    }
    SUBCASE("wrong coarse levels contribute their weights") {
        // Classes 1 and 2 each fill half the grid; coarse maps say background.
        auto labels = torch::ones({8, 8, 2}, torch::kInt64);
        labels.narrow(0, 4, 4).fill_(2);
        auto target = onehot(labels, 3);
        auto wrong2 = torch::zeros({1, 3, 4, 4, 1}, torch::kFloat64);
        wrong2.select(1, 0).fill_(1.0);
        auto wrong3 = torch::zeros({1, 3, 2, 2, 1}, torch::kFloat64);
        wrong3.select(1, 0).fill_(1.0);
        // Per class: 1 - eps / (64 + eps); level weights 1/2 and 1/4.
        const double per_level = 1.0 - obj::kDiceEpsilon / (64.0 + obj::kDiceEpsilon);
        auto loss = obj::region_loss({target, wrong2, wrong3}, target).item<double>();
        CHECK(loss == doctest::Approx(0.75 * per_level).epsilon(1e-12));
    }
    auto target = onehot(torch::zeros({8, 8, 2}, torch::kInt64), 3);
    CHECK_THROWS_AS(obj::region_loss({torch::zeros({1, 4, 8, 8, 2})}, target), ContractError);
}

TEST_CASE("composite_loss bookkeeping and ablation switches") {
    torch::manual_seed(31);
    network::ForwardResult fwd;
    fwd.field = torch::randn({1, 3, 6, 6, 4}, torch::kFloat64) * 0.5;
    fwd.address_maps = {torch::softmax(torch::randn({1, 4, 6, 6, 4}, torch::kFloat64), 1)};
    obj::PairBatch batch;
    batch.moving = torch::rand({1, 1, 6, 6, 4}, torch::kFloat64);
    batch.fixed = torch::rand({1, 1, 6, 6, 4}, torch::kFloat64);
    batch.moving_onehot = onehot(torch::randint(0, 4, {6, 6, 4}, torch::kInt64), 4);
    batch.fixed_onehot = onehot(torch::randint(0, 4, {6, 6, 4}, torch::kInt64), 4);

    obj::LossWeights all;
    auto l = obj::composite_loss(batch, fwd, all).values();
    CHECK(l.total == l.sim + l.dsc + all.smoothness * l.reg + l.rgn);
    CHECK(l.dsc > 0.0);
    CHECK(l.rgn > 0.0);

    obj::LossWeights unsup{0.01, false, false};
    network::ForwardResult plain{fwd.state, fwd.field, {}};
    obj::PairBatch no_masks{batch.moving, batch.fixed, {}, {}};
    auto u = obj::composite_loss(no_masks, plain, unsup).values();
    CHECK(u.dsc == 0.0);
    CHECK(u.rgn == 0.0);
    CHECK(u.total == u.sim + 0.01 * u.reg);
    CHECK_THROWS_AS(obj::composite_loss(no_masks, fwd, all), ContractError);

    // Identical pair, identity field, perfect addressing.
    network::ForwardResult perfect;
    perfect.field = torch::zeros({1, 3, 6, 6, 4}, torch::kFloat64);
    perfect.address_maps = {batch.fixed_onehot};
    obj::PairBatch same{batch.fixed, batch.fixed, batch.fixed_onehot, batch.fixed_onehot};
    CHECK(obj::composite_loss(same, perfect, all).values().total < 1e-4);
}

TEST_CASE("loss term gradients match central differences") {
    torch::manual_seed(32);
    auto field = torch::randn({1, 3, 6, 6, 4}, torch::kFloat64) * 0.7;
    auto moving = torch::rand({1, 1, 6, 6, 4}, torch::kFloat64);
    auto fixed = torch::rand({1, 1, 6, 6, 4}, torch::kFloat64);
    auto mov_oh = onehot(torch::randint(0, 3, {6, 6, 4}, torch::kInt64), 3);
    auto fix_oh = onehot(torch::randint(0, 3, {6, 6, 4}, torch::kInt64), 3);
    auto logits = torch::randn({1, 3, 3, 3, 2}, torch::kFloat64);

    auto check = [](const char* name, const std::function<torch::Tensor(const torch::Tensor&)>& f,
                    const torch::Tensor& x) {
        auto v = x.clone().requires_grad_(true);
        f(v).backward();
        auto num = oracle::numeric_gradient([&](const torch::Tensor& y) { return f(y).item<double>(); }, x, 1e-6);
        CHECK_MESSAGE(oracle::relative_error(v.grad(), num) < 1e-2, name);
    };
    check("sim", [&](const torch::Tensor& u) { return obj::similarity_mse(fixed, fieldops::warp(moving, u)); }, field);
    check("dsc", [&](const torch::Tensor& u) { return obj::dice_loss(fix_oh, mov_oh, u); }, field);
    check("reg", [&](const torch::Tensor& u) { return obj::smoothness_reg(u); }, field);
    check("rgn",
          [&](const torch::Tensor& z) {
              return obj::region_loss({torch::softmax(z, 1).repeat_interleave(2, 2).repeat_interleave(2, 3).repeat_interleave(2, 4),
                                       torch::softmax(z, 1)},
                                      fix_oh);
          },
          logits);
}
