#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <random>

#include "backlab/train.hpp"
#include "doctest.h"

using namespace backlab;
using nn::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(std::move(shape));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data) v = static_cast<float>(u(rng));
    return t;
}

double rel_err(const std::vector<double>& a, const std::vector<double>& f) {
    REQUIRE(a.size() == f.size());
    REQUIRE(!a.empty());
    double num = 0.0, na = 0.0, nf = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - f[i]) * (a[i] - f[i]);
        na += a[i] * a[i];
        nf += f[i] * f[i];
    }
    return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nf), 1e-12});
}

// central differences of a double-valued loss over every slot of a float tensor
std::vector<double> fd_grad(Tensor& t, const std::function<double()>& eval) {
    const double h = 1.0 / 4096.0;
    std::vector<double> g(t.numel());
    for (size_t i = 0; i < t.numel(); ++i) {
        const float orig = t.data[i];
        const float up = static_cast<float>(static_cast<double>(orig) + h);
        const float dn = static_cast<float>(static_cast<double>(orig) - h);
        t.data[i] = up;
        double lp = eval();
        t.data[i] = dn;
        double lm = eval();
        t.data[i] = orig;
        g[i] = (lp - lm) / (static_cast<double>(up) - static_cast<double>(dn));
    }
    return g;
}

std::vector<double> to_vec(const Tensor& t) {
    return std::vector<double>(t.data.begin(), t.data.end());
}

std::vector<std::vector<double>> normalize_rows(const Tensor& t) {
    int n = t.dim(0), d = t.dim(1);
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            double v = t.data[static_cast<size_t>(i * d + j)];
            s += v * v;
        }
        s = std::sqrt(std::max(s, 1e-24));
        for (int j = 0; j < d; ++j)
            out[i][j] = t.data[static_cast<size_t>(i * d + j)] / s;
    }
    return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double vmean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("cross entropy matches a log-softmax oracle and finite differences") {
    Tensor logits = random_tensor({6, 5}, 3, -2.0, 2.0);
    std::vector<int> labels = {0, 3, 4, 2, 1, 3};
    auto r = nn::cross_entropy(logits, labels);

    for (int i = 0; i < 6; ++i) {
        double mx = -1e30;
        for (int c = 0; c < 5; ++c) mx = std::max(mx, (double)logits.data[i * 5 + c]);
        double z = 0.0;
        for (int c = 0; c < 5; ++c) z += std::exp((double)logits.data[i * 5 + c] - mx);
        double want = -((double)logits.data[i * 5 + labels[i]] - mx - std::log(z));
        CHECK(r.per_sample[i] == doctest::Approx(want).epsilon(1e-9));
        int arg = 0;
        for (int c = 1; c < 5; ++c)
            if (logits.data[i * 5 + c] > logits.data[i * 5 + arg]) arg = c;
        CHECK(r.predictions[i] == arg);
        double p = std::exp((double)logits.data[i * 5 + arg] - mx) / z;
        CHECK(r.max_prob[i] == doctest::Approx(p).epsilon(1e-9));
    }
    CHECK(r.loss == doctest::Approx(vmean(r.per_sample)).epsilon(1e-12));

    auto fd = fd_grad(logits, [&] { return nn::cross_entropy(logits, labels, false).loss; });
    CHECK(rel_err(to_vec(r.glogits), fd) < 1e-4);
}

TEST_CASE("infonce matches its oracle and finite differences") {
    Tensor a = random_tensor({4, 6}, 5), p = random_tensor({4, 6}, 7),
           n = random_tensor({8, 6}, 9);
    const double tau = 0.5;
    auto r = nn::infonce_loss(a, p, n, tau);

    auto ah = normalize_rows(a), ph = normalize_rows(p), nh = normalize_rows(n);
    std::vector<double> want(4);
    for (int i = 0; i < 4; ++i) {
        double spos = dot(ah[i], ph[i]) / tau;
        double z = std::exp(spos);
        for (int j = 0; j < 8; ++j) z += std::exp(dot(ah[i], nh[j]) / tau);
        want[i] = -(spos - std::log(z));
        CHECK(r.per_anchor[i] == doctest::Approx(want[i]).epsilon(1e-9));
    }
    CHECK(r.loss == doctest::Approx(vmean(want)).epsilon(1e-9));

    auto eval = [&] { return nn::infonce_loss(a, p, n, tau).loss; };
    CHECK(rel_err(to_vec(r.ganchor), fd_grad(a, eval)) < 1e-4);
    CHECK(rel_err(to_vec(r.gpositive), fd_grad(p, eval)) < 1e-4);
    CHECK(rel_err(to_vec(r.gnegative), fd_grad(n, eval)) < 1e-4);
}

TEST_CASE("ntxent matches its oracle and finite differences") {
    const int B = 3, D = 5;
    Tensor z = random_tensor({2 * B, D}, 11);
    const double tau = 0.5;
    auto r = nn::ntxent_loss(z, tau);

    auto zh = normalize_rows(z);
    std::vector<double> anchor_loss(2 * B);
    for (int i = 0; i < 2 * B; ++i) {
        int partner = i ^ 1;
        double den = 0.0;
        for (int j = 0; j < 2 * B; ++j)
            if (j != i) den += std::exp(dot(zh[i], zh[j]) / tau);
        anchor_loss[i] = -(dot(zh[i], zh[partner]) / tau - std::log(den));
    }
    CHECK(r.loss == doctest::Approx(vmean(anchor_loss)).epsilon(1e-9));
    REQUIRE(static_cast<int>(r.per_sample.size()) == B);
    for (int b = 0; b < B; ++b)
        CHECK(r.per_sample[b] ==
              doctest::Approx(0.5 * (anchor_loss[2 * b] + anchor_loss[2 * b + 1]))
                  .epsilon(1e-9));
    CHECK(vmean(r.per_sample) == doctest::Approx(r.loss).epsilon(1e-9));

    auto fd = fd_grad(z, [&] { return nn::ntxent_loss(z, tau).loss; });
    CHECK(rel_err(to_vec(r.gz), fd) < 1e-4);
}

TEST_CASE("byol matches its oracle and finite differences") {
    Tensor q = random_tensor({5, 7}, 13), t = random_tensor({5, 7}, 15);
    auto r = nn::byol_loss(q, t);
    auto qh = normalize_rows(q), th = normalize_rows(t);
    for (int i = 0; i < 5; ++i) {
        double want = 2.0 - 2.0 * dot(qh[i], th[i]);
        CHECK(r.per_sample[i] == doctest::Approx(want).epsilon(1e-9));
    }
    CHECK(r.loss == doctest::Approx(vmean(r.per_sample)).epsilon(1e-12));

    auto fd = fd_grad(q, [&] { return nn::byol_loss(q, t).loss; });
    CHECK(rel_err(to_vec(r.gpred), fd) < 1e-4);

    // stop-gradient: the target carries no gradient field, and perturbing it
    // must not feed back through gpred
    Tensor q2 = q;
    auto r2 = nn::byol_loss(q2, t);
    CHECK(to_vec(r2.gpred) == to_vec(r.gpred));
}

TEST_CASE("moco matches its oracle and finite differences") {
    Tensor q = random_tensor({4, 6}, 17), k = random_tensor({4, 6}, 19),
           queue = random_tensor({10, 6}, 21);
    const double tau = 0.2;
    auto r = nn::moco_loss(q, k, queue, tau);

    auto qh = normalize_rows(q), kh = normalize_rows(k), Qh = normalize_rows(queue);
    std::vector<double> want(4);
    for (int i = 0; i < 4; ++i) {
        double pos = dot(qh[i], kh[i]) / tau;
        double z = std::exp(pos);
        for (int j = 0; j < 10; ++j) z += std::exp(dot(qh[i], Qh[j]) / tau);
        want[i] = -(pos - std::log(z));
        CHECK(r.per_sample[i] == doctest::Approx(want[i]).epsilon(1e-9));
    }
    CHECK(r.loss == doctest::Approx(vmean(want)).epsilon(1e-9));

    auto fd = fd_grad(q, [&] { return nn::moco_loss(q, k, queue, tau).loss; });
    CHECK(rel_err(to_vec(r.gquery), fd) < 1e-4);
}

TEST_CASE("supervised training reduces the loss") {
    auto ds = data::make_synthetic("tr", "train", 96, 4, 16, 3);
    train::TrainConfig cfg;
    cfg.method = train::Method::supervised;
    cfg.epochs = 4;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.seed = 5;
    cfg.aug = data::AugmentationPolicy::none();
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    ec.proj_dim = 16;
    auto res = train::train(ds, std::vector<bool>(ds.size(), false), ec, cfg);
    REQUIRE(res.classifier.has_value());
    REQUIRE(res.log.epochs() == 4);
    CHECK(res.log.clean_loss.back() < res.log.clean_loss.front());
    for (double l : res.log.clean_loss) CHECK(std::isfinite(l));
    // cosine schedule echoed in the log
    for (int e = 0; e < 4; ++e)
        CHECK(res.log.lr[e] == doctest::Approx(nn::cosine_lr(0.05, e, 4)).epsilon(1e-9));
    // per-sample trace has one row per epoch, one column per sample
    REQUIRE(res.log.per_sample.size() == 4);
    CHECK(res.log.per_sample[0].size() == static_cast<size_t>(ds.size()));
}

TEST_CASE("poisoned rows are tracked in their own loss column") {
    auto ds = data::make_synthetic("tr2", "train", 64, 4, 16, 7);
    std::vector<bool> flags(ds.size(), false);
    for (int i = 0; i < 8; ++i) flags[i * 8] = true;
    train::TrainConfig cfg;
    cfg.method = train::Method::supervised;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.lr = 0.02;
    cfg.aug = data::AugmentationPolicy::none();
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    auto res = train::train(ds, flags, ec, cfg);
    for (double l : res.log.poison_loss) CHECK(std::isfinite(l));
    CHECK(res.log.poison_loss.size() == 2);
}

TEST_CASE("contrastive training runs and logs finite losses") {
    auto ds = data::make_synthetic("cl", "train", 48, 4, 16, 9);
    for (auto m : {train::Method::simclr, train::Method::byol, train::Method::moco}) {
        train::TrainConfig cfg;
        cfg.method = m;
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.lr = 0.03;
        cfg.moco_queue = 32;
        cfg.seed = 11;
        nn::EncoderConfig ec;
        ec.backbone.width_mult = 0.125;
        ec.proj_dim = 16;
        auto res = train::train(ds, std::vector<bool>(ds.size(), false), ec, cfg);
        CHECK(!res.classifier.has_value());
        REQUIRE(res.log.epochs() == 2);
        for (double l : res.log.clean_loss) CHECK(std::isfinite(l));
    }
}

TEST_CASE("dynamic-trigger training produces a bounded generator") {
    auto ds = data::make_synthetic("dyn", "train", 48, 4, 16, 13);
    data::PoisonSpec spec = data::default_poison_spec(trigger::TriggerKind::dynamic_gen, 1, 0.1);
    spec.trig.dyn.base_channels = 4;
    train::TrainConfig cfg;
    cfg.method = train::Method::supervised;
    cfg.epochs = 2;
    cfg.generator_epochs = 2;
    cfg.batch_size = 16;
    cfg.lr = 0.02;
    cfg.aug = data::AugmentationPolicy::none();
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    auto res = train::train(ds, std::vector<bool>(ds.size(), false), ec, cfg, &spec);
    REQUIRE(res.generator.has_value());
    Image r = res.generator->residual_image(ds.images[0]);
    double mx = 0.0;
    for (double v : r.v) mx = std::max(mx, std::fabs(v));
    CHECK(mx <= spec.trig.dyn.amplitude + 1e-6);
    CHECK(mx > 0.0);
    for (double l : res.log.poison_loss) CHECK(std::isfinite(l));
}

TEST_CASE("linear probe leaves the encoder bitwise untouched") {
    auto ds = data::make_synthetic("probe", "train", 48, 4, 16, 15);
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    ec.proj_dim = 16;
    nn::EncoderModel enc = nn::build_encoder(ec);
    std::vector<nn::NamedTensor> before_view;
    enc.collect(before_view);
    std::vector<std::vector<float>> before;
    for (auto& t : before_view) before.push_back(t.value->data);

    train::DownstreamConfig dc;
    dc.mode = train::DownstreamMode::linear_probe;
    dc.epochs = 2;
    dc.batch_size = 16;
    dc.aug = data::AugmentationPolicy::none();
    nn::Classifier clf = train::fit_downstream(enc, ds, dc);
    CHECK(clf.num_classes == 4);

    std::vector<nn::NamedTensor> after_view;
    enc.collect(after_view);
    for (size_t i = 0; i < before.size(); ++i)
        CHECK(before[i] == after_view[i].value->data);

    // the returned classifier's encoder matches too
    std::vector<nn::NamedTensor> clf_view;
    clf.enc.collect(clf_view);
    for (size_t i = 0; i < before.size(); ++i)
        CHECK(before[i] == clf_view[i].value->data);

    // fine-tune moves the encoder
    train::DownstreamConfig ft = dc;
    ft.mode = train::DownstreamMode::fine_tune;
    ft.lr = 0.01;
    nn::Classifier clf2 = train::fit_downstream(enc, ds, ft);
    std::vector<nn::NamedTensor> ft_view;
    clf2.enc.collect(ft_view);
    bool changed = false;
    for (size_t i = 0; i < before.size(); ++i)
        if (before[i] != ft_view[i].value->data) changed = true;
    CHECK(changed);
}

TEST_CASE("encode_dataset is batch-size invariant") {
    auto ds = data::make_synthetic("enc", "test", 20, 4, 16, 17);
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    ec.proj_dim = 16;
    nn::EncoderModel enc = nn::build_encoder(ec);
    Tensor a = train::encode_dataset(enc, ds, 7);
    Tensor b = train::encode_dataset(enc, ds, 20);
    REQUIRE(a.same_shape(b));
    CHECK(a.dim(0) == 20);
    CHECK(a.dim(1) == enc.backbone.feature_dim());
    double mx = 0.0;
    for (size_t i = 0; i < a.numel(); ++i)
        mx = std::max(mx, std::fabs((double)a.data[i] - b.data[i]));
    CHECK(mx < 1e-5);

    Tensor p = train::encode_dataset(enc, ds, 8, true);
    CHECK(p.dim(1) == ec.proj_dim);
}

TEST_CASE("dynamics log round-trips through csv") {
    namespace fs = std::filesystem;
    train::DynamicsLog log;
    log.epoch = {0, 1, 2};
    log.clean_loss = {2.5, 1.25, 0.75};
    log.poison_loss = {3.0, 0.5, 0.125};
    log.lr = {0.1, 0.05, 0.0};
    log.per_sample = {{1.0, 2.0, 3.0}, {0.5, 1.5, 2.5}, {0.25, 0.75, 1.25}};

    auto dir = fs::temp_directory_path() / "backlab_train_log";
    fs::create_directories(dir);
    log.save_csv((dir / "d.csv").string());
    log.save_trace((dir / "t.csv").string());

    auto back = train::DynamicsLog::load_csv((dir / "d.csv").string());
    REQUIRE(back.epochs() == 3);
    for (int e = 0; e < 3; ++e) {
        CHECK(back.epoch[e] == e);
        CHECK(back.clean_loss[e] == doctest::Approx(log.clean_loss[e]).epsilon(1e-12));
        CHECK(back.poison_loss[e] == doctest::Approx(log.poison_loss[e]).epsilon(1e-12));
        CHECK(back.lr[e] == doctest::Approx(log.lr[e]).epsilon(1e-12));
    }
    auto trace = train::DynamicsLog::load_trace((dir / "t.csv").string());
    REQUIRE(trace.size() == 3);
    for (int e = 0; e < 3; ++e)
        for (int i = 0; i < 3; ++i)
            CHECK(trace[e][i] == doctest::Approx(log.per_sample[e][i]).epsilon(1e-12));
    fs::remove_all(dir);
}

TEST_CASE("model checkpoints round-trip bitwise") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "backlab_train_ckpt";
    fs::create_directories(dir);

    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.25;
    ec.backbone.family = nn::BackboneFamily::mobilenet;
    ec.proj_dim = 8;
    nn::EncoderModel enc = nn::build_encoder(ec);
    train::save_encoder((dir / "e.ckpt").string(), enc);
    nn::EncoderModel enc2 = train::load_encoder((dir / "e.ckpt").string());
    CHECK(enc2.cfg.backbone.family == nn::BackboneFamily::mobilenet);
    std::vector<nn::NamedTensor> a, b;
    enc.collect(a);
    enc2.collect(b);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].value->data == b[i].value->data);

    nn::Classifier clf(enc.clone(), 6, 3);
    train::save_classifier((dir / "c.ckpt").string(), clf);
    nn::Classifier clf2 = train::load_classifier((dir / "c.ckpt").string());
    CHECK(clf2.num_classes == 6);
    CHECK(clf2.head.W.data == clf.head.W.data);

    nn::GeneratorConfig gc;
    gc.base_channels = 4;
    nn::GeneratorNet gen = nn::build_generator(gc);
    train::save_generator((dir / "g.ckpt").string(), gen);
    nn::GeneratorNet gen2 = train::load_generator((dir / "g.ckpt").string());
    std::vector<nn::NamedTensor> ga, gb;
    gen.collect(ga);
    gen2.collect(gb);
    for (size_t i = 0; i < ga.size(); ++i) CHECK(ga[i].value->data == gb[i].value->data);
    CHECK(gen2.cfg.amplitude == doctest::Approx(gc.amplitude));
    fs::remove_all(dir);
}

TEST_CASE("method names and config validation") {
    for (auto m : {train::Method::supervised, train::Method::simclr, train::Method::byol,
                   train::Method::moco})
        CHECK(train::method_from_name(train::method_name(m)) == m);
    CHECK_THROWS_AS(train::method_from_name("sgd"), backlab::error);
    CHECK(train::is_contrastive(train::Method::simclr));
    CHECK(!train::is_contrastive(train::Method::supervised));

    train::TrainConfig bad;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), backlab::error);
    bad.epochs = 2;
    bad.batch_size = 1;
    CHECK_THROWS_AS(bad.validate(), backlab::error);
    bad.batch_size = 32;
    bad.tau = 0.0;
    CHECK_THROWS_AS(bad.validate(), backlab::error);
    bad.tau = 0.5;
    bad.lr = -1.0;
    CHECK_THROWS_AS(bad.validate(), backlab::error);
    bad.lr = 0.1;
    bad.validate();
}
