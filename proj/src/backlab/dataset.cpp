#include "backlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace backlab::data {

void ImageDataset::validate() const {
    check(images.size() == labels.size(), "dataset '", name, "': ", images.size(),
          " images vs ", labels.size(), " labels");
    check(num_classes > 0, "dataset '", name, "': num_classes must be positive");
    for (std::size_t i = 0; i < labels.size(); ++i)
        check(labels[i] >= 0 && labels[i] < num_classes, "dataset '", name, "': label ",
              labels[i], " at row ", i, " outside [0,", num_classes, ")");
}

ImageDataset load_manifest(const std::string& manifest_path, const std::string& split,
                           const std::string& name) {
    std::ifstream in(manifest_path);
    check(in.good(), "load_manifest: cannot open ", manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();

    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "load_manifest: empty manifest ",
          manifest_path);
    check(line == "path,label,split", "load_manifest: expected header 'path,label,split', got '",
          line, "'");

    ImageDataset ds;
    ds.name = name.empty() ? fs::path(manifest_path).parent_path().filename().string() : name;
    ds.split = split;
    int max_label = -1;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        check(c1 != std::string::npos && c2 != std::string::npos, "load_manifest: line ", lineno,
              ": expected path,label,split");
        const std::string path = line.substr(0, c1);
        const std::string label_str = line.substr(c1 + 1, c2 - c1 - 1);
        const std::string row_split = line.substr(c2 + 1);
        int label = 0;
        try {
            label = std::stoi(label_str);
        } catch (const std::exception&) {
            throw error(strf("load_manifest: line ", lineno, ": bad label '", label_str, "'"));
        }
        check(label >= 0, "load_manifest: line ", lineno, ": negative label");
        max_label = std::max(max_label, label);
        if (row_split != split) continue;
        ds.images.push_back(read_png((base / path).string()));
        ds.labels.push_back(label);
    }
    check(!ds.images.empty(), "load_manifest: no rows with split '", split, "' in ",
          manifest_path);
    ds.num_classes = max_label + 1;
    ds.validate();
    return ds;
}

void save_as_manifest(const ImageDataset& ds, const std::string& dir) {
    ds.validate();
    fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / "manifest.csv");
    check(out.good(), "save_as_manifest: cannot write manifest in ", dir);
    out << "path,label,split\n";
    for (int i = 0; i < ds.size(); ++i) {
        const std::string rel = strf(ds.split, "_", i, ".png");
        write_png((fs::path(dir) / rel).string(), ds.images[i]);
        out << rel << "," << ds.labels[i] << "," << ds.split << "\n";
    }
}

namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const double m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

}  // namespace

ImageDataset make_synthetic(const std::string& name, const std::string& split, int n,
                            int num_classes, int hw, std::uint64_t seed) {
    check(n > 0 && num_classes > 0 && hw >= 8, "make_synthetic: bad arguments");
    ImageDataset ds;
    ds.name = name;
    ds.split = split;
    ds.num_classes = num_classes;
    ds.images.reserve(n);
    ds.labels.reserve(n);
    Rng rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double pi = std::acos(-1.0);

    for (int i = 0; i < n; ++i) {
        const int k = i % num_classes;  // balanced
        ds.labels.push_back(k);
        Image img(hw, hw, 3);

        double base[3];
        hsv_to_rgb(static_cast<double>(k) / num_classes, 0.35, 0.55, base);
        const double bright = 1.0 + 0.3 * (u01(rng) - 0.5);

        const double theta = pi * k / num_classes;
        const double freq = 2.0 + (k % 5);
        const double phase = 2.0 * pi * u01(rng);

        double blob_rgb[3];
        hsv_to_rgb(static_cast<double>(k) / num_classes + 0.5, 0.6, 0.9, blob_rgb);
        const double cy = hw * (0.25 + 0.5 * u01(rng));
        const double cx = hw * (0.25 + 0.5 * u01(rng));
        const double sigma = hw * (0.10 + 0.02 * (k % 4));

        for (int y = 0; y < hw; ++y)
            for (int x = 0; x < hw; ++x) {
                const double t = (x * std::cos(theta) + y * std::sin(theta)) / hw;
                const double wave = 0.18 * std::sin(2.0 * pi * freq * t + phase);
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                const double blob = 0.30 * std::exp(-d2 / (2.0 * sigma * sigma));
                for (int ch = 0; ch < 3; ++ch) {
                    double v = base[ch] * bright + wave + blob * blob_rgb[ch];
                    v += 0.04 * gauss(rng);
                    img.at(y, x, ch) = v;
                }
            }
        clip01(img);
        ds.images.push_back(std::move(img));
    }
    ds.validate();
    return ds;
}

// ---- poisoning -------------------------------------------------------------

void PoisonSpec::validate(int num_classes) const {
    check(target_class >= 0 && target_class < num_classes, "poison spec: target class ",
          target_class, " outside [0,", num_classes, ")");
    check(rate >= 0.0 && rate <= 1.0, "poison spec: rate must lie in [0,1], got ", rate);
}

PoisonSpec default_poison_spec(trigger::TriggerKind kind, int target_class, double rate) {
    PoisonSpec spec;
    spec.target_class = target_class;
    spec.rate = rate;
    spec.trig.kind = kind;
    if (kind == trigger::TriggerKind::dynamic_gen) {
        spec.selection = SelectionMode::all_classes;
        spec.label_mode = LabelMode::relabel_target;
    } else {
        spec.selection = SelectionMode::target_class;
        spec.label_mode = LabelMode::relabel_target;  // no-op on target-class rows
    }
    trigger::ensure_patch(spec.trig);
    return spec;
}

int poison_count(double rate, int n) {
    check(rate >= 0.0 && rate <= 1.0, "poison_count: rate must lie in [0,1], got ", rate);
    return static_cast<int>(std::floor(rate * n + 0.5));
}

std::vector<int> select_candidates(const ImageDataset& ds, const PoisonSpec& spec, Rng& rng) {
    spec.validate(ds.num_classes);
    std::vector<int> pool;
    if (spec.selection == SelectionMode::target_class) {
        for (int i = 0; i < ds.size(); ++i)
            if (ds.labels[i] == spec.target_class) pool.push_back(i);
    } else {
        pool.resize(ds.size());
        for (int i = 0; i < ds.size(); ++i) pool[i] = i;
    }
    const int want = poison_count(spec.rate, ds.size());
    check(static_cast<int>(pool.size()) >= want, "select_candidates: need ", want,
          " candidate rows but only ", pool.size(),
          spec.selection == SelectionMode::target_class ? " target-class rows available"
                                                        : " rows available");
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(want);
    std::sort(pool.begin(), pool.end());
    return pool;
}

namespace {

json trigger_spec_json(const trigger::TriggerSpec& t) {
    json j;
    j["kind"] = trigger::kind_name(t.kind);
    switch (t.kind) {
        case trigger::TriggerKind::universal:
            j["side"] = t.uni.side;
            j["patch_seed"] = t.uni.patch_seed;
            j["placement"] = t.uni.placement == trigger::Placement::random_pos ? "random" : "fixed";
            j["fixed_y"] = t.uni.fixed_y;
            j["fixed_x"] = t.uni.fixed_x;
            j["alpha"] = t.uni.alpha;
            break;
        case trigger::TriggerKind::functional:
            j["magnitude"] = t.fun.magnitude;
            j["block"] = t.fun.block;
            j["bands"] = t.fun.bands;
            j["channels"] = t.fun.channels;
            j["strict_blocks"] = t.fun.strict_blocks;
            break;
        case trigger::TriggerKind::dynamic_gen:
            j["rho_a"] = t.dyn.rho_a;
            j["rho_b"] = t.dyn.rho_b;
            j["amplitude"] = t.dyn.amplitude;
            j["base_channels"] = t.dyn.base_channels;
            j["init_seed"] = t.dyn.init_seed;
            break;
    }
    return j;
}

}  // namespace

std::vector<bool> PoisonRecord::flags(int n) const {
    std::vector<bool> f(n, false);
    for (int i : indices) {
        check(i >= 0 && i < n, "PoisonRecord::flags: index ", i, " outside dataset of size ", n);
        f[i] = true;
    }
    return f;
}

void PoisonRecord::save(const std::string& path) const {
    json j;
    j["seed"] = seed;
    j["trigger_kind"] = trigger_kind;
    j["target_class"] = target_class;
    j["rate"] = rate;
    j["selection"] = selection;
    j["label_mode"] = label_mode;
    j["indices"] = indices;
    j["spec"] = json::parse(spec_json.empty() ? "{}" : spec_json);
    json entries_json = json::array();
    for (const auto& e : entries) {
        json ej;
        ej["index"] = e.index;
        ej["original_label"] = e.original_label;
        if (trigger_kind == "universal") {
            ej["patch_y"] = e.patch_y;
            ej["patch_x"] = e.patch_x;
        }
        if (trigger_kind == "functional") ej["magnitude"] = e.magnitude;
        entries_json.push_back(ej);
    }
    j["entries"] = entries_json;
    std::ofstream out(path);
    check(out.good(), "PoisonRecord::save: cannot write ", path);
    out << j.dump(2) << "\n";
}

PoisonRecord PoisonRecord::load(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "PoisonRecord::load: cannot open ", path);
    json j = json::parse(in);
    PoisonRecord r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.trigger_kind = j.at("trigger_kind").get<std::string>();
    r.target_class = j.at("target_class").get<int>();
    r.rate = j.at("rate").get<double>();
    r.selection = j.at("selection").get<std::string>();
    r.label_mode = j.at("label_mode").get<std::string>();
    r.indices = j.at("indices").get<std::vector<int>>();
    r.spec_json = j.at("spec").dump();
    for (const auto& ej : j.at("entries")) {
        PoisonEntry e;
        e.index = ej.at("index").get<int>();
        e.original_label = ej.at("original_label").get<int>();
        e.patch_y = ej.value("patch_y", 0);
        e.patch_x = ej.value("patch_x", 0);
        e.magnitude = ej.value("magnitude", 0.0);
        r.entries.push_back(e);
    }
    return r;
}

std::pair<ImageDataset, PoisonRecord> build_poisoned_dataset(const ImageDataset& ds,
                                                             const PoisonSpec& spec,
                                                             std::uint64_t seed) {
    ds.validate();
    spec.validate(ds.num_classes);
    check(spec.trig.kind != trigger::TriggerKind::dynamic_gen,
          "build_poisoned_dataset: generator triggers are applied during training by the mode "
          "sampler, not baked into the dataset");

    Rng rng(seed);
    const std::vector<int> idx = select_candidates(ds, spec, rng);

    ImageDataset out = ds;
    PoisonRecord rec;
    rec.seed = seed;
    rec.trigger_kind = trigger::kind_name(spec.trig.kind);
    rec.target_class = spec.target_class;
    rec.rate = spec.rate;
    rec.selection = spec.selection == SelectionMode::target_class ? "target_class" : "all_classes";
    rec.label_mode = spec.label_mode == LabelMode::clean ? "clean" : "relabel_target";
    rec.indices = idx;
    rec.spec_json = trigger_spec_json(spec.trig).dump();

    trigger::TriggerSpec trig = spec.trig;
    trigger::ensure_patch(trig);
    for (int i : idx) {
        PoisonEntry e;
        e.index = i;
        e.original_label = ds.labels[i];
        if (trig.kind == trigger::TriggerKind::universal) {
            trigger::PatchPlacement placed;
            out.images[i] = trigger::apply_universal(ds.images[i], trig.uni, rng, &placed);
            e.patch_y = placed.y;
            e.patch_x = placed.x;
        } else {
            out.images[i] = trigger::apply_functional(ds.images[i], trig.fun);
            e.magnitude = trig.fun.magnitude;
        }
        if (spec.label_mode == LabelMode::relabel_target) out.labels[i] = spec.target_class;
        rec.entries.push_back(e);
    }
    return {std::move(out), std::move(rec)};
}

ImageDataset make_test_trigger_set(const ImageDataset& test_set, const PoisonSpec& spec,
                                   std::uint64_t seed, const trigger::GeneratorFn* gen) {
    test_set.validate();
    spec.validate(test_set.num_classes);
    ImageDataset out;
    out.name = test_set.name + "+trigger";
    out.split = test_set.split;
    out.num_classes = test_set.num_classes;
    Rng rng(seed);
    trigger::TriggerSpec trig = spec.trig;
    trigger::ensure_patch(trig);
    for (int i = 0; i < test_set.size(); ++i) {
        if (test_set.labels[i] == spec.target_class) continue;  // success measured off-target
        switch (trig.kind) {
            case trigger::TriggerKind::universal:
                out.images.push_back(trigger::apply_universal(test_set.images[i], trig.uni, rng));
                break;
            case trigger::TriggerKind::functional:
                out.images.push_back(trigger::apply_functional(test_set.images[i], trig.fun));
                break;
            case trigger::TriggerKind::dynamic_gen: {
                check(gen != nullptr,
                      "make_test_trigger_set: generator triggers need the trained generator");
                out.images.push_back(
                    trigger::add_residual(test_set.images[i], (*gen)(test_set.images[i])));
                break;
            }
        }
        out.labels.push_back(test_set.labels[i]);  // true label; attack target is implicit
    }
    check(!out.images.empty(), "make_test_trigger_set: no off-target rows in test set");
    return out;
}

}  // namespace backlab::data
