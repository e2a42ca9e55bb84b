#include "doctest.h"

#include <cmath>

#include "atlasgen/style.hpp"
#include "gradcheck.hpp"

using namespace atlasgen;
using namespace atlasgen::style;
using voxelcore::Volume;

namespace {

StyleEncoderConfig tiny_cfg() {
    StyleEncoderConfig c;
    c.channels = {4, 8};
    c.style_dim = 6;
    return c;
}

Volume random_volume(Rng& rng, int d, int h, int w) {
    Tensor t({d, h, w});
    for (auto& v : t.data) v = rng.uniform();
    return Volume(std::move(t));
}

Tensor unit_row(int dim, int axis) {
    Tensor t({1, dim});
    t.data[static_cast<size_t>(axis)] = 1.0;
    return t;
}

} // namespace

TEST_CASE("encode_style is deterministic and order-preserving") {
    Rng rng(301);
    StyleEncoder enc(tiny_cfg(), rng);
    Volume a = random_volume(rng, 8, 8, 8);
    Volume b = random_volume(rng, 8, 8, 8);
    StyleCode c1 = encode_style(enc, a);
    StyleCode c2 = encode_style(enc, a);
    CHECK(c1.vector.data == c2.vector.data);

    auto batch = encode_style(enc, {&a, &b});
    REQUIRE(batch.size() == 2);
    CHECK(batch[0].vector.data == c1.vector.data);
    StyleCode cb = encode_style(enc, b);
    CHECK(batch[1].vector.data == cb.vector.data);
}

TEST_CASE("encode_style rejects indivisible shapes with the factor named") {
    Rng rng(302);
    StyleEncoder enc(tiny_cfg(), rng); // factor 4
    Volume bad = random_volume(rng, 6, 8, 8);
    try {
        encode_style(enc, bad);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("4") != std::string::npos);
    }
}

TEST_CASE("KeyQueue FIFO semantics") {
    KeyQueue q(4, 3);

    auto row = [](real a, real b, real c) {
        Tensor t({1, 3});
        t.data = {a, b, c};
        return t;
    };
    for (int i = 0; i < 4; ++i) enqueue_keys(q, row(static_cast<real>(i), 0, 0));
    CHECK(q.size() == 4);
    enqueue_keys(q, row(99, 0, 0));
    CHECK(q.size() == 4);
    Tensor m = q.as_matrix();
    // first inserted (0) evicted; oldest remaining is 1
    CHECK(m.data[0] == 1.0);
    CHECK(m.data[9] == 99.0);

    // batch larger than capacity keeps the most recent K
    Tensor big({6, 3});
    for (int i = 0; i < 6; ++i) big.data[static_cast<size_t>(i) * 3] = static_cast<real>(10 + i);
    enqueue_keys(q, big);
    CHECK(q.size() == 4);
    CHECK(q.as_matrix().data[0] == 12.0);

    // empty insert leaves the queue unchanged
    KeyQueue q2(4, 3);
    enqueue_keys(q2, row(1, 2, 3));
    Tensor before = q2.as_matrix();
    enqueue_keys(q2, std::vector<Tensor>{});
    CHECK(q2.as_matrix().data == before.data);
}

TEST_CASE("queue length equals min(K, inserted) over random sequences") {
    Rng rng(303);
    for (int rep = 0; rep < 100; ++rep) {
        const int K = 1 + static_cast<int>(rng.uniform_int(8));
        KeyQueue q(K, 2);
        int inserted = 0;
        const int ops = 1 + static_cast<int>(rng.uniform_int(20));
        for (int o = 0; o < ops; ++o) {
            const int n = 1 + static_cast<int>(rng.uniform_int(5));
            Tensor batch({n, 2});
            for (auto& v : batch.data) v = rng.normal();
            enqueue_keys(q, batch);
            inserted += n;
            CHECK(q.size() == std::min(K, inserted));
        }
    }
}

TEST_CASE("contrastive_loss uniform case equals log(K+1)") {
    const int dim = 5;
    KeyQueue q(8, dim);
    for (int i = 0; i < 8; ++i) enqueue_keys(q, unit_row(dim, 0));
    ad::Var qv = ad::constant(unit_row(dim, 0));
    ad::Var kv = ad::constant(unit_row(dim, 0));
    const real loss = contrastive_loss(qv, kv, q, 0.7).item();
    CHECK(std::fabs(loss - std::log(9.0)) <= 1e-6);
}

TEST_CASE("contrastive_loss matches scalar evaluation on the K=1 case") {
    const real tau = 0.7;
    KeyQueue q(1, 2);
    Tensor neg({1, 2});
    neg.data = {-1.0, 0.0};
    enqueue_keys(q, neg);
    Tensor qt({1, 2});
    qt.data = {10 * tau, 0.0}; // q.k+ = 10 tau, q.k1 = -10 tau
    ad::Var qv = ad::constant(qt);
    ad::Var kv = ad::constant(unit_row(2, 0));
    const real loss = contrastive_loss(qv, kv, q, tau).item();
    CHECK(loss == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-6));
}

TEST_CASE("contrastive_loss rejects non-positive temperature and empty queue") {
    KeyQueue q(2, 2);
    enqueue_keys(q, unit_row(2, 0));
    ad::Var qv = ad::constant(unit_row(2, 0));
    CHECK_THROWS_AS(contrastive_loss(qv, qv, q, 0.0), UsageError);
    CHECK_THROWS_AS(contrastive_loss(qv, qv, q, -1.0), UsageError);
    KeyQueue empty(2, 2);
    CHECK_THROWS_AS(contrastive_loss(qv, qv, empty, 0.7), ShapeError);
}

TEST_CASE("contrastive_loss is invariant under permutation of negatives") {
    Rng rng(304);
    const int dim = 8, K = 6;
    std::vector<Tensor> negs;
    for (int i = 0; i < K; ++i) {
        Tensor t({1, dim});
        real ss = 0;
        for (auto& v : t.data) {
            v = rng.normal();
            ss += v * v;
        }
        for (auto& v : t.data) v /= std::sqrt(ss);
        negs.push_back(t);
    }
    Tensor qt({1, dim});
    real ss = 0;
    for (auto& v : qt.data) {
        v = rng.normal();
        ss += v * v;
    }
    for (auto& v : qt.data) v /= std::sqrt(ss);
    ad::Var qv = ad::constant(qt);
    ad::Var kv = ad::constant(qt);

    std::vector<real> losses;
    std::vector<int> order = {0, 1, 2, 3, 4, 5};
    for (int rep = 0; rep < 10; ++rep) {
        rng.shuffle(order);
        KeyQueue q(K, dim);
        for (int i : order) enqueue_keys(q, negs[static_cast<size_t>(i)]);
        losses.push_back(contrastive_loss(qv, kv, q, 0.7).item());
    }
    for (real l : losses) CHECK(std::fabs(l - losses[0]) <= 1e-6);
}

TEST_CASE("contrastive_loss strictly decreases as the positive dot grows") {
    KeyQueue q(4, 2);
    Tensor n({1, 2});
    n.data = {0.0, 1.0};
    for (int i = 0; i < 4; ++i) enqueue_keys(q, n);
    Tensor qt({1, 2});
    qt.data = {1.0, 0.0};
    ad::Var qv = ad::constant(qt);
    real prev = 1e300;
    for (real d : {-0.5, 0.0, 0.4, 0.9}) {
        Tensor kp({1, 2});
        kp.data = {d, std::sqrt(1 - d * d)}; // q.k+ = d, negatives fixed
        ad::Var kv = ad::constant(kp);
        const real l = contrastive_loss(qv, kv, q, 0.7).item();
        CHECK(l < prev);
        prev = l;
    }
}

TEST_CASE("contrastive_loss backpropagates into query and positive key") {
    Rng rng(305);
    KeyQueue q(3, 4);
    for (int i = 0; i < 3; ++i) {
        Tensor t({1, 4});
        for (auto& v : t.data) v = rng.normal();
        enqueue_keys(q, t);
    }
    ad::Var qv = ad::parameter(agtest::random_normal_tensor(rng, {2, 4}));
    ad::Var kv = ad::parameter(agtest::random_normal_tensor(rng, {2, 4}));
    auto f = [&] {
        return contrastive_loss(ad::l2_normalize_rows(qv), ad::l2_normalize_rows(kv), q, 0.7);
    };
    CHECK(agtest::gradcheck(f, {qv, kv}).max_rel_err < 1e-5);
}

TEST_CASE("momentum_update endpoints and segment property") {
    Rng rng(306);
    StyleEncoder query(tiny_cfg(), rng);
    StyleEncoder key(tiny_cfg(), rng);
    ad::ParamMap a;
    key.collect(a); // old key values (live views, copy them out)
    std::vector<std::vector<real>> old_vals;
    for (auto& [n, v] : a.items) old_vals.push_back(v.value().data);

    StyleEncoder key_m1(tiny_cfg(), rng);
    key_m1.copy_from(key);
    momentum_update(query, key_m1, 1.0);
    ad::ParamMap b;
    key_m1.collect(b);
    for (size_t i = 0; i < b.items.size(); ++i)
        CHECK(old_vals[i] == b.items[i].second.value().data);

    StyleEncoder key_m0(tiny_cfg(), rng);
    key_m0.copy_from(key);
    momentum_update(query, key_m0, 0.0);
    ad::ParamMap qp, kp;
    query.collect(qp);
    key_m0.collect(kp);
    for (size_t i = 0; i < qp.items.size(); ++i)
        CHECK(qp.items[i].second.value().data == kp.items[i].second.value().data);

    StyleEncoder key_mid(tiny_cfg(), rng);
    key_mid.copy_from(key);
    momentum_update(query, key_mid, 0.6);
    ad::ParamMap mp;
    key_mid.collect(mp);
    for (size_t i = 0; i < qp.items.size(); ++i) {
        const auto& q_v = qp.items[i].second.value().data;
        const auto& new_v = mp.items[i].second.value().data;
        for (size_t j = 0; j < new_v.size(); ++j) {
            const real lo = std::min(old_vals[i][j], q_v[j]) - 1e-12;
            const real hi = std::max(old_vals[i][j], q_v[j]) + 1e-12;
            CHECK(new_v[j] >= lo);
            CHECK(new_v[j] <= hi);
            CHECK(new_v[j] == doctest::Approx(0.6 * old_vals[i][j] + 0.4 * q_v[j]));
        }
    }
}

TEST_CASE("generate_positive_key with a zero-flow transformer returns the query") {
    Rng rng(307);
    flow::FlowModelConfig fc;
    fc.enc_channels = {4, 8};
    fc.dec_channels = {8, 4};
    flow::FlowModel t_model(fc, rng); // zero-init head -> identity warp
    Volume q = random_volume(rng, 8, 8, 8);
    Volume target = random_volume(rng, 8, 8, 8);
    Volume kpos = generate_positive_key(q, target, t_model);
    CHECK(kpos.data.data == q.data.data);

    CHECK_THROWS_AS(generate_positive_key(q, target, t_model, /*t_is_trained=*/false), DataError);
}

TEST_CASE("latent discriminator maps [N,dim] to [N]") {
    Rng rng(308);
    LatentDiscriminatorConfig dc;
    dc.in_dim = 6;
    dc.hidden = {8};
    LatentDiscriminator d(dc, rng);
    ad::Var codes = ad::constant(agtest::random_normal_tensor(rng, {5, 6}));
    CHECK(d.forward(codes).shape() == std::vector<int>({5}));
}
