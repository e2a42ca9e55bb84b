#include "doctest.h"

// Analytic-vs-central-difference checks for the loss primitives, double
// precision on 8^3 inputs; relative tolerance 1e-3 everywhere (most ops land
// far below it).

#include "atlasgen/voxelcore.hpp"
#include "gradcheck.hpp"

using namespace atlasgen;
using namespace atlasgen::voxelcore;
using agtest::gradcheck;
using agtest::random_tensor;

TEST_CASE("warp gradient vs finite differences (image and flow)") {
    Rng rng(201);
    ad::Var img = ad::parameter(random_tensor(rng, {1, 1, 8, 8, 8}));
    Tensor ft({1, 3, 8, 8, 8});
    for (auto& v : ft.data) v = rng.uniform(0.15, 0.8); // off-lattice, interior
    ad::Var flow = ad::parameter(ft);
    auto f = [&] { return ad::mean(ad::square(ad::warp3d(img, flow, ad::WarpMode::Trilinear))); };
    auto res = gradcheck(f, {img, flow});
    CAPTURE(res.where);
    CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("ssim_l1 gradient vs finite differences") {
    Rng rng(202);
    ad::Var u = ad::parameter(random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
    ad::Var v = ad::parameter(random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
    SsimOptions o;
    o.window = 5; // 8^3 probe needs a window smaller than the default 11
    auto f = [&] { return ssim_l1_loss(u, v, o); };
    auto res = gradcheck(f, {u, v});
    CAPTURE(res.where);
    CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("ncc gradient vs finite differences") {
    Rng rng(203);
    ad::Var u = ad::parameter(random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
    ad::Var v = ad::parameter(random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
    auto f = [&] { return ncc_loss(u, v, 5); };
    auto res = gradcheck(f, {u, v});
    CAPTURE(res.where);
    CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("flow_gradient_l1 gradient vs finite differences") {
    Rng rng(204);
    ad::Var flow = ad::parameter(random_tensor(rng, {1, 3, 8, 8, 8}, -1.0, 1.0));
    auto f = [&] { return ad::flow_grad_l1(flow); };
    auto res = gradcheck(f, {flow});
    CAPTURE(res.where);
    CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("warped-image composite gradient (loss of warp under ssim)") {
    Rng rng(205);
    ad::Var mov = ad::parameter(random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
    ad::Var fix = ad::parameter(random_tensor(rng, {1, 1, 8, 8, 8}, 0.1, 0.9));
    Tensor ft({1, 3, 8, 8, 8});
    for (auto& v : ft.data) v = rng.uniform(0.15, 0.65);
    ad::Var flow = ad::parameter(ft);
    SsimOptions o;
    o.window = 5;
    auto f = [&] {
        ad::Var warped = ad::warp3d(mov, flow, ad::WarpMode::Trilinear);
        return ad::add(ssim_l1_loss(fix, warped, o), ad::mul_scalar(ad::flow_grad_l1(flow), 0.1));
    };
    auto res = gradcheck(f, {mov, fix, flow});
    CAPTURE(res.where);
    CHECK(res.max_rel_err <= 1e-3);
}
