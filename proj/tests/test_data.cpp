#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <set>

#include "backlab/dataset.hpp"
#include "doctest.h"

using namespace backlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("backlab_data_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("synthetic corpus is deterministic and balanced") {
    auto a = data::make_synthetic("synth", "train", 200, 10, 16, 5);
    auto b = data::make_synthetic("synth", "train", 200, 10, 16, 5);
    auto c = data::make_synthetic("synth", "train", 200, 10, 16, 6);
    REQUIRE(a.size() == 200);
    CHECK(a.num_classes == 10);
    CHECK(a.images[0].h == 16);
    CHECK(a.images[0].w == 16);
    CHECK(a.images[0].c == 3);
    double diff = 0.0, diff_seed = 0.0;
    for (int i = 0; i < 200; ++i) {
        diff = std::max(diff, max_abs_diff(a.images[i], b.images[i]));
        diff_seed = std::max(diff_seed, max_abs_diff(a.images[i], c.images[i]));
        CHECK(a.labels[i] == b.labels[i]);
        for (double v : a.images[i].v) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    CHECK(diff == 0.0);
    CHECK(diff_seed > 0.0);

    std::vector<int> counts(10, 0);
    for (int l : a.labels) counts[l]++;
    for (int c10 : counts) CHECK(c10 == 20);
    a.validate();  // must not throw
}

TEST_CASE("classes are separable in pixel space") {
    // per-class mean images should differ far more across classes than the
    // per-image noise within a class
    auto ds = data::make_synthetic("synth", "train", 400, 4, 16, 9);
    int d = 16 * 16 * 3;
    std::vector<std::vector<double>> mean(4, std::vector<double>(d, 0.0));
    std::vector<int> n(4, 0);
    for (int i = 0; i < ds.size(); ++i) {
        int l = ds.labels[i];
        ++n[l];
        for (int j = 0; j < d; ++j) mean[l][j] += ds.images[i].v[j];
    }
    for (int l = 0; l < 4; ++l)
        for (int j = 0; j < d; ++j) mean[l][j] /= n[l];
    double min_between = 1e9;
    for (int aa = 0; aa < 4; ++aa)
        for (int bb = aa + 1; bb < 4; ++bb) {
            double s = 0.0;
            for (int j = 0; j < d; ++j) {
                double dd = mean[aa][j] - mean[bb][j];
                s += dd * dd;
            }
            min_between = std::min(min_between, std::sqrt(s));
        }
    CHECK(min_between > 0.5);
}

TEST_CASE("manifest round trip preserves images up to 8-bit quantization") {
    auto ds = data::make_synthetic("rt", "train", 12, 3, 8, 7);
    auto dir = temp_dir("manifest");
    data::save_as_manifest(ds, dir.string());
    auto back = data::load_manifest((dir / "manifest.csv").string(), "train", "rt");
    REQUIRE(back.size() == ds.size());
    CHECK(back.num_classes == ds.num_classes);
    for (int i = 0; i < ds.size(); ++i) {
        CHECK(back.labels[i] == ds.labels[i]);
        CHECK(max_abs_diff(back.images[i], ds.images[i]) <= 0.5 / 255.0 + 1e-12);
    }
    CHECK_THROWS_AS(data::load_manifest((dir / "missing.csv").string(), "train"),
                    backlab::error);
    fs::remove_all(dir);
}

TEST_CASE("poison_count rounds half up") {
    struct Row {
        double rate;
        int n, want;
    };
    for (auto [rate, n, want] : std::vector<Row>{{0.01, 1000, 10},
                                                 {0.01, 1049, 10},
                                                 {0.01, 1050, 11},
                                                 {0.005, 100, 1},
                                                 {0.0049, 100, 0},
                                                 {0.0, 500, 0},
                                                 {1.0, 500, 500},
                                                 {0.015, 100, 2}})
        CHECK(data::poison_count(rate, n) == want);
}

TEST_CASE("candidate selection respects the mode") {
    auto ds = data::make_synthetic("sel", "train", 300, 10, 8, 3);
    data::PoisonSpec spec;
    spec.target_class = 4;
    spec.rate = 0.05;
    spec.selection = data::SelectionMode::target_class;
    Rng rng(2);
    auto idx = data::select_candidates(ds, spec, rng);
    CHECK(static_cast<int>(idx.size()) == data::poison_count(0.05, 300));
    for (size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] > idx[i - 1]);
    for (int i : idx) CHECK(ds.labels[i] == 4);

    spec.selection = data::SelectionMode::all_classes;
    Rng rng2(2);
    auto idx2 = data::select_candidates(ds, spec, rng2);
    CHECK(idx2.size() == idx.size());
    std::set<int> labels_seen;
    for (int i : idx2) labels_seen.insert(ds.labels[i]);
    CHECK(labels_seen.size() > 1);
}

TEST_CASE("build_poisoned_dataset stamps rows and records them") {
    auto ds = data::make_synthetic("p", "train", 200, 10, 32, 3);
    data::PoisonSpec spec = data::default_poison_spec(trigger::TriggerKind::universal, 2, 0.1);
    trigger::ensure_patch(spec.trig);
    auto [pds, rec] = data::build_poisoned_dataset(ds, spec, 11);
    REQUIRE(pds.size() == ds.size());
    CHECK(rec.indices.size() == rec.entries.size());
    CHECK(static_cast<int>(rec.indices.size()) == data::poison_count(0.1, 200));
    CHECK(rec.trigger_kind == "universal");
    CHECK(rec.target_class == 2);

    auto flags = rec.flags(ds.size());
    int flagged = 0;
    for (int i = 0; i < ds.size(); ++i) {
        if (flags[i]) {
            ++flagged;
            CHECK(max_abs_diff(pds.images[i], ds.images[i]) > 0.0);
            CHECK(pds.labels[i] == 2);  // clean-label on target class
            CHECK(ds.labels[i] == 2);
        } else {
            CHECK(max_abs_diff(pds.images[i], ds.images[i]) == 0.0);
            CHECK(pds.labels[i] == ds.labels[i]);
        }
    }
    CHECK(flagged == static_cast<int>(rec.indices.size()));

    // recorded placements reproduce the stamped pixels
    for (size_t e = 0; e < rec.entries.size(); ++e) {
        const auto& ent = rec.entries[e];
        int i = rec.indices[e];
        CHECK(ent.index == i);
        CHECK(ent.original_label == ds.labels[i]);
        const Image& patch = spec.trig.uni.patch;
        for (int py = 0; py < patch.h; ++py)
            for (int px = 0; px < patch.w; ++px)
                for (int ch = 0; ch < 3; ++ch)
                    CHECK(pds.images[i].at(ent.patch_y + py, ent.patch_x + px, ch) ==
                          doctest::Approx(patch.at(py, px, ch)).epsilon(1e-12));
    }

    // determinism
    auto [pds2, rec2] = data::build_poisoned_dataset(ds, spec, 11);
    CHECK(rec2.indices == rec.indices);
    double d2 = 0.0;
    for (int i = 0; i < ds.size(); ++i)
        d2 = std::max(d2, max_abs_diff(pds.images[i], pds2.images[i]));
    CHECK(d2 == 0.0);

    // generator triggers are train-time only
    data::PoisonSpec dspec = data::default_poison_spec(trigger::TriggerKind::dynamic_gen, 2, 0.1);
    CHECK_THROWS_AS(data::build_poisoned_dataset(ds, dspec, 11), backlab::error);
}

TEST_CASE("relabel mode rewrites labels across classes") {
    auto ds = data::make_synthetic("p2", "train", 200, 10, 32, 4);
    data::PoisonSpec spec = data::default_poison_spec(trigger::TriggerKind::dynamic_gen, 7, 0.1);
    spec.trig.kind = trigger::TriggerKind::functional;  // keep all_classes+relabel
    auto [pds, rec] = data::build_poisoned_dataset(ds, spec, 5);
    bool crossed = false;
    for (size_t e = 0; e < rec.indices.size(); ++e) {
        int i = rec.indices[e];
        CHECK(pds.labels[i] == 7);
        if (rec.entries[e].original_label != 7) crossed = true;
        CHECK(rec.entries[e].magnitude == doctest::Approx(spec.trig.fun.magnitude));
    }
    CHECK(crossed);
}

TEST_CASE("poison record round-trips through json") {
    auto ds = data::make_synthetic("p3", "train", 100, 10, 32, 8);
    data::PoisonSpec spec = data::default_poison_spec(trigger::TriggerKind::universal, 1, 0.05);
    trigger::ensure_patch(spec.trig);
    auto [pds, rec] = data::build_poisoned_dataset(ds, spec, 13);
    rec.spec_json = "{\"k\":1}";
    auto dir = temp_dir("rec");
    auto path = (dir / "rec.json").string();
    rec.save(path);
    auto back = data::PoisonRecord::load(path);
    CHECK(back.seed == rec.seed);
    CHECK(back.trigger_kind == rec.trigger_kind);
    CHECK(back.target_class == rec.target_class);
    CHECK(back.rate == doctest::Approx(rec.rate));
    CHECK(back.selection == rec.selection);
    CHECK(back.label_mode == rec.label_mode);
    CHECK(back.indices == rec.indices);
    CHECK(back.spec_json == rec.spec_json);
    REQUIRE(back.entries.size() == rec.entries.size());
    for (size_t e = 0; e < rec.entries.size(); ++e) {
        CHECK(back.entries[e].index == rec.entries[e].index);
        CHECK(back.entries[e].patch_y == rec.entries[e].patch_y);
        CHECK(back.entries[e].patch_x == rec.entries[e].patch_x);
    }
    auto flags = back.flags(100);
    CHECK(std::count(flags.begin(), flags.end(), true) ==
          static_cast<long>(back.indices.size()));
    fs::remove_all(dir);
}

TEST_CASE("test trigger set excludes the target class") {
    auto ds = data::make_synthetic("t", "test", 150, 10, 32, 6);
    data::PoisonSpec spec = data::default_poison_spec(trigger::TriggerKind::functional, 3, 0.01);
    auto trig = data::make_test_trigger_set(ds, spec, 17);
    int off_target = 0;
    for (int l : ds.labels)
        if (l != 3) ++off_target;
    CHECK(trig.size() == off_target);
    for (int l : trig.labels) CHECK(l != 3);
    CHECK(trig.num_classes == 10);

    // deterministic for the same seed
    auto trig2 = data::make_test_trigger_set(ds, spec, 17);
    double d = 0.0;
    for (int i = 0; i < trig.size(); ++i)
        d = std::max(d, max_abs_diff(trig.images[i], trig2.images[i]));
    CHECK(d == 0.0);

    // generator trigger needs its closure
    data::PoisonSpec dspec = data::default_poison_spec(trigger::TriggerKind::dynamic_gen, 3, 0.01);
    CHECK_THROWS_AS(data::make_test_trigger_set(ds, dspec, 17), backlab::error);
    trigger::GeneratorFn gen = [](const Image& x) { return Image(x.h, x.w, x.c, 0.05); };
    auto dtrig = data::make_test_trigger_set(ds, dspec, 17, &gen);
    CHECK(dtrig.size() == off_target);
    CHECK(max_abs_diff(dtrig.images[0], ds.images[0]) > 0.0);
}

TEST_CASE("default poison specs follow the trigger family") {
    auto uni = data::default_poison_spec(trigger::TriggerKind::universal, 2, 0.03);
    CHECK(uni.selection == data::SelectionMode::target_class);
    auto fun = data::default_poison_spec(trigger::TriggerKind::functional, 2, 0.03);
    CHECK(fun.selection == data::SelectionMode::target_class);
    auto dyn = data::default_poison_spec(trigger::TriggerKind::dynamic_gen, 2, 0.03);
    CHECK(dyn.selection == data::SelectionMode::all_classes);
    CHECK(dyn.label_mode == data::LabelMode::relabel_target);
    CHECK(dyn.rate == doctest::Approx(0.03));
    CHECK(dyn.target_class == 2);
}

TEST_CASE("spec validation rejects bad values") {
    data::PoisonSpec spec;
    spec.target_class = 11;
    CHECK_THROWS_AS(spec.validate(10), backlab::error);
    spec.target_class = 3;
    spec.rate = 1.5;
    CHECK_THROWS_AS(spec.validate(10), backlab::error);
    spec.rate = -0.1;
    CHECK_THROWS_AS(spec.validate(10), backlab::error);
    spec.rate = 0.2;
    spec.validate(10);

    data::ImageDataset ds;
    ds.num_classes = 2;
    ds.images.push_back(Image(4, 4, 3, 0.5));
    ds.labels = {0, 1};  // size mismatch
    CHECK_THROWS_AS(ds.validate(), backlab::error);
}
