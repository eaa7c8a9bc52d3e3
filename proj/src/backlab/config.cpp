#include "backlab/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

namespace backlab::config {

using nlohmann::json;

void reject_unknown(const json& j, const std::vector<std::string>& allowed,
                    const std::string& ctx) {
    if (!j.is_object()) throw ConfigError(strf("config block '", ctx, "' must be an object"));
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key()))
            throw ConfigError(strf("unknown key '", it.key(), "' in config block '", ctx, "'"));
    }
}

namespace {

std::uint64_t get_u64(const json& j, const char* key, std::uint64_t def) {
    if (!j.contains(key)) return def;
    return j.at(key).get<std::uint64_t>();
}

const char* selection_name(data::SelectionMode m) {
    return m == data::SelectionMode::target_class ? "target_class" : "all_classes";
}
data::SelectionMode selection_from(const std::string& s) {
    if (s == "target_class") return data::SelectionMode::target_class;
    if (s == "all_classes") return data::SelectionMode::all_classes;
    throw ConfigError(strf("unknown selection mode '", s, "'"));
}

const char* label_mode_name(data::LabelMode m) {
    return m == data::LabelMode::clean ? "clean" : "relabel_target";
}
data::LabelMode label_mode_from(const std::string& s) {
    if (s == "clean") return data::LabelMode::clean;
    if (s == "relabel_target") return data::LabelMode::relabel_target;
    throw ConfigError(strf("unknown label mode '", s, "'"));
}

const char* downstream_mode_name(train::DownstreamMode m) {
    return m == train::DownstreamMode::linear_probe ? "linear_probe" : "fine_tune";
}
train::DownstreamMode downstream_mode_from(const std::string& s) {
    if (s == "linear_probe") return train::DownstreamMode::linear_probe;
    if (s == "fine_tune") return train::DownstreamMode::fine_tune;
    throw ConfigError(strf("unknown downstream mode '", s, "'"));
}

json trigger_to_json(const trigger::TriggerSpec& t) {
    json j;
    j["kind"] = trigger::kind_name(t.kind);
    j["universal"] = {{"side", t.uni.side},
                      {"patch_seed", t.uni.patch_seed},
                      {"placement", t.uni.placement == trigger::Placement::fixed ? "fixed" : "random"},
                      {"fixed_y", t.uni.fixed_y},
                      {"fixed_x", t.uni.fixed_x},
                      {"alpha", t.uni.alpha}};
    j["functional"] = {{"magnitude", t.fun.magnitude},
                       {"block", t.fun.block},
                       {"bands", t.fun.bands},
                       {"channels", t.fun.channels},
                       {"strict_blocks", t.fun.strict_blocks}};
    j["dynamic"] = {{"rho_a", t.dyn.rho_a},
                    {"rho_b", t.dyn.rho_b},
                    {"amplitude", t.dyn.amplitude},
                    {"base_channels", t.dyn.base_channels},
                    {"init_seed", t.dyn.init_seed}};
    return j;
}

trigger::TriggerSpec trigger_from_json(const json& j) {
    reject_unknown(j, {"kind", "universal", "functional", "dynamic"}, "attack.trigger");
    trigger::TriggerSpec t;
    if (j.contains("kind")) t.kind = trigger::kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("universal")) {
        const json& u = j.at("universal");
        reject_unknown(u, {"side", "patch_seed", "placement", "fixed_y", "fixed_x", "alpha"},
                       "attack.trigger.universal");
        t.uni.side = u.value("side", t.uni.side);
        t.uni.patch_seed = get_u64(u, "patch_seed", t.uni.patch_seed);
        if (u.contains("placement")) {
            std::string p = u.at("placement").get<std::string>();
            if (p == "fixed")
                t.uni.placement = trigger::Placement::fixed;
            else if (p == "random")
                t.uni.placement = trigger::Placement::random_pos;
            else
                throw ConfigError(strf("unknown patch placement '", p, "'"));
        }
        t.uni.fixed_y = u.value("fixed_y", t.uni.fixed_y);
        t.uni.fixed_x = u.value("fixed_x", t.uni.fixed_x);
        t.uni.alpha = u.value("alpha", t.uni.alpha);
    }
    if (j.contains("functional")) {
        const json& f = j.at("functional");
        reject_unknown(f, {"magnitude", "block", "bands", "channels", "strict_blocks"},
                       "attack.trigger.functional");
        t.fun.magnitude = f.value("magnitude", t.fun.magnitude);
        t.fun.block = f.value("block", t.fun.block);
        if (f.contains("bands")) t.fun.bands = f.at("bands").get<std::vector<int>>();
        if (f.contains("channels")) t.fun.channels = f.at("channels").get<std::vector<int>>();
        t.fun.strict_blocks = f.value("strict_blocks", t.fun.strict_blocks);
    }
    if (j.contains("dynamic")) {
        const json& d = j.at("dynamic");
        reject_unknown(d, {"rho_a", "rho_b", "amplitude", "base_channels", "init_seed"},
                       "attack.trigger.dynamic");
        t.dyn.rho_a = d.value("rho_a", t.dyn.rho_a);
        t.dyn.rho_b = d.value("rho_b", t.dyn.rho_b);
        t.dyn.amplitude = d.value("amplitude", t.dyn.amplitude);
        t.dyn.base_channels = d.value("base_channels", t.dyn.base_channels);
        t.dyn.init_seed = get_u64(d, "init_seed", t.dyn.init_seed);
    }
    return t;
}

}  // namespace

void DatasetConfig::validate() const {
    if (kind != "synthetic" && kind != "manifest")
        throw ConfigError(strf("dataset.kind must be 'synthetic' or 'manifest', got '", kind, "'"));
    if (kind == "synthetic") {
        if (train_size <= 0 || test_size <= 0 || num_classes <= 1 || image_size <= 0)
            throw ConfigError("synthetic dataset sizes/classes must be positive");
    } else if (train_manifest.empty() || test_manifest.empty()) {
        throw ConfigError("manifest dataset needs train_manifest and test_manifest paths");
    }
}

data::AugmentationPolicy aug_preset(const std::string& name) {
    if (name == "contrastive") return data::AugmentationPolicy::contrastive();
    if (name == "supervised") return data::AugmentationPolicy::supervised();
    if (name == "none") return data::AugmentationPolicy::none();
    throw ConfigError(strf("unknown augmentation preset '", name, "'"));
}

std::string validate_defense_entry(const json& entry, int idx) {
    if (!entry.is_object() || !entry.contains("kind"))
        throw ConfigError(strf("defenses[", idx, "] must be an object with a 'kind' key"));
    std::string kind = entry.at("kind").get<std::string>();
    static const std::map<std::string, std::vector<std::string>> allowed = {
        {"abl",
         {"kind", "rate_grid", "isolation_rate", "early_epochs", "gamma_ratio", "unlearn_epochs",
          "unlearn_lr"}},
        {"activation_clustering", {"kind", "pca_dim", "kmeans_iters", "seed"}},
        {"scan", {"kind", "cov_reg", "em_iters", "class_threshold", "fpr_grid"}},
        {"strip",
         {"kind", "n_overlays", "alpha", "fpr_grid", "operating_row", "seed", "batch",
          "max_inputs"}},
        {"bdd", {"kind", "threshold", "use_percentile", "percentile", "batch"}},
        {"density", {"kind", "eps", "n_min", "top_j"}},
        {"fine_prune", {"kind", "max_channels", "stride"}},
        {"clp", {"kind", "u_grid", "window", "order"}},
        {"neural_cleanse",
         {"kind", "lambda", "steps", "lr", "batch", "pool", "seed", "anomaly_threshold",
          "success_target"}},
        {"fine_tune",
         {"kind", "b_train_size", "b_test_size", "b_num_classes", "b_seed", "epochs", "lr",
          "mode"}},
        {"ensemble",
         {"kind", "eps", "n_min", "top_j", "u_grid", "window", "order", "retrain_epochs"}},
    };
    auto it = allowed.find(kind);
    if (it == allowed.end())
        throw ConfigError(strf("defenses[", idx, "]: unknown defense kind '", kind, "'"));
    reject_unknown(entry, it->second, strf("defenses[", idx, "] (", kind, ")"));
    return kind;
}

json ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["dataset"] = {{"kind", dataset.kind},
                    {"name", dataset.name},
                    {"train_size", dataset.train_size},
                    {"test_size", dataset.test_size},
                    {"num_classes", dataset.num_classes},
                    {"image_size", dataset.image_size},
                    {"seed", dataset.seed},
                    {"train_manifest", dataset.train_manifest},
                    {"test_manifest", dataset.test_manifest}};
    j["attack"] = {{"target_class", attack.target_class},
                   {"rate", attack.rate},
                   {"selection", selection_name(attack.selection)},
                   {"label_mode", label_mode_name(attack.label_mode)},
                   {"seed", poison_seed},
                   {"trigger", trigger_to_json(attack.trig)}};
    j["training"] = {{"method", train::method_name(training.method)},
                     {"epochs", training.epochs},
                     {"batch_size", training.batch_size},
                     {"lr", training.lr},
                     {"momentum", training.momentum},
                     {"weight_decay", training.weight_decay},
                     {"tau", training.tau},
                     {"byol_ema", training.byol_ema},
                     {"moco_ema", training.moco_ema},
                     {"moco_queue", training.moco_queue},
                     {"seed", training.seed},
                     {"augmentation", training_aug},
                     {"log_per_sample", training.log_per_sample},
                     {"generator_epochs", training.generator_epochs}};
    j["encoder"] = {{"family", nn::family_name(encoder.backbone.family)},
                    {"width_mult", encoder.backbone.width_mult},
                    {"stem_stride", encoder.backbone.stem_stride},
                    {"init_seed", encoder.backbone.init_seed},
                    {"proj_dim", encoder.proj_dim},
                    {"proj_hidden", encoder.proj_hidden}};
    j["downstream"] = {{"mode", downstream_mode_name(downstream.mode)},
                       {"epochs", downstream.epochs},
                       {"lr", downstream.lr},
                       {"batch_size", downstream.batch_size},
                       {"seed", downstream.seed},
                       {"augmentation", downstream_aug}};
    j["analysis"] = {{"er",
                      {{"k", analysis.er.k},
                       {"per_class", analysis.er.per_class},
                       {"m_test", analysis.er.m_test},
                       {"seed", analysis.er.seed}}},
                     {"mi",
                      {{"k", analysis.mi_k}, {"max_n", analysis.mi_max_n}, {"seed", analysis.mi_seed}}},
                     {"eval_batch", analysis.eval_batch}};
    j["defenses"] = defenses;
    j["output_root"] = output_root;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    try {
        reject_unknown(j,
                       {"name", "dataset", "attack", "training", "encoder", "downstream",
                        "analysis", "defenses", "output_root"},
                       "<root>");
        ExperimentConfig c;
        c.name = j.value("name", c.name);
        if (j.contains("dataset")) {
            const json& d = j.at("dataset");
            reject_unknown(d,
                           {"kind", "name", "train_size", "test_size", "num_classes",
                            "image_size", "seed", "train_manifest", "test_manifest"},
                           "dataset");
            c.dataset.kind = d.value("kind", c.dataset.kind);
            c.dataset.name = d.value("name", c.dataset.name);
            c.dataset.train_size = d.value("train_size", c.dataset.train_size);
            c.dataset.test_size = d.value("test_size", c.dataset.test_size);
            c.dataset.num_classes = d.value("num_classes", c.dataset.num_classes);
            c.dataset.image_size = d.value("image_size", c.dataset.image_size);
            c.dataset.seed = get_u64(d, "seed", c.dataset.seed);
            c.dataset.train_manifest = d.value("train_manifest", c.dataset.train_manifest);
            c.dataset.test_manifest = d.value("test_manifest", c.dataset.test_manifest);
        }
        if (j.contains("attack")) {
            const json& a = j.at("attack");
            reject_unknown(a, {"target_class", "rate", "selection", "label_mode", "seed", "trigger"},
                           "attack");
            c.attack.target_class = a.value("target_class", c.attack.target_class);
            c.attack.rate = a.value("rate", c.attack.rate);
            if (a.contains("selection"))
                c.attack.selection = selection_from(a.at("selection").get<std::string>());
            if (a.contains("label_mode"))
                c.attack.label_mode = label_mode_from(a.at("label_mode").get<std::string>());
            c.poison_seed = get_u64(a, "seed", c.poison_seed);
            if (a.contains("trigger")) c.attack.trig = trigger_from_json(a.at("trigger"));
        }
        if (j.contains("training")) {
            const json& t = j.at("training");
            reject_unknown(t,
                           {"method", "epochs", "batch_size", "lr", "momentum", "weight_decay",
                            "tau", "byol_ema", "moco_ema", "moco_queue", "seed", "augmentation",
                            "log_per_sample", "generator_epochs"},
                           "training");
            if (t.contains("method"))
                c.training.method = train::method_from_name(t.at("method").get<std::string>());
            c.training.epochs = t.value("epochs", c.training.epochs);
            c.training.batch_size = t.value("batch_size", c.training.batch_size);
            c.training.lr = t.value("lr", c.training.lr);
            c.training.momentum = t.value("momentum", c.training.momentum);
            c.training.weight_decay = t.value("weight_decay", c.training.weight_decay);
            c.training.tau = t.value("tau", c.training.tau);
            c.training.byol_ema = t.value("byol_ema", c.training.byol_ema);
            c.training.moco_ema = t.value("moco_ema", c.training.moco_ema);
            c.training.moco_queue = t.value("moco_queue", c.training.moco_queue);
            c.training.seed = get_u64(t, "seed", c.training.seed);
            c.training_aug = t.value("augmentation", c.training_aug);
            c.training.log_per_sample = t.value("log_per_sample", c.training.log_per_sample);
            c.training.generator_epochs = t.value("generator_epochs", c.training.generator_epochs);
        }
        if (j.contains("encoder")) {
            const json& e = j.at("encoder");
            reject_unknown(
                e, {"family", "width_mult", "stem_stride", "init_seed", "proj_dim", "proj_hidden"},
                "encoder");
            if (e.contains("family"))
                c.encoder.backbone.family = nn::family_from_name(e.at("family").get<std::string>());
            c.encoder.backbone.width_mult = e.value("width_mult", c.encoder.backbone.width_mult);
            c.encoder.backbone.stem_stride = e.value("stem_stride", c.encoder.backbone.stem_stride);
            c.encoder.backbone.init_seed = get_u64(e, "init_seed", c.encoder.backbone.init_seed);
            c.encoder.proj_dim = e.value("proj_dim", c.encoder.proj_dim);
            c.encoder.proj_hidden = e.value("proj_hidden", c.encoder.proj_hidden);
        }
        if (j.contains("downstream")) {
            const json& d = j.at("downstream");
            reject_unknown(d, {"mode", "epochs", "lr", "batch_size", "seed", "augmentation"},
                           "downstream");
            if (d.contains("mode"))
                c.downstream.mode = downstream_mode_from(d.at("mode").get<std::string>());
            c.downstream.epochs = d.value("epochs", c.downstream.epochs);
            c.downstream.lr = d.value("lr", c.downstream.lr);
            c.downstream.batch_size = d.value("batch_size", c.downstream.batch_size);
            c.downstream.seed = get_u64(d, "seed", c.downstream.seed);
            c.downstream_aug = d.value("augmentation", c.downstream_aug);
        }
        if (j.contains("analysis")) {
            const json& a = j.at("analysis");
            reject_unknown(a, {"er", "mi", "eval_batch"}, "analysis");
            if (a.contains("er")) {
                const json& e = a.at("er");
                reject_unknown(e, {"k", "per_class", "m_test", "seed"}, "analysis.er");
                c.analysis.er.k = e.value("k", c.analysis.er.k);
                c.analysis.er.per_class = e.value("per_class", c.analysis.er.per_class);
                c.analysis.er.m_test = e.value("m_test", c.analysis.er.m_test);
                c.analysis.er.seed = get_u64(e, "seed", c.analysis.er.seed);
            }
            if (a.contains("mi")) {
                const json& m = a.at("mi");
                reject_unknown(m, {"k", "max_n", "seed"}, "analysis.mi");
                c.analysis.mi_k = m.value("k", c.analysis.mi_k);
                c.analysis.mi_max_n = m.value("max_n", c.analysis.mi_max_n);
                c.analysis.mi_seed = get_u64(m, "seed", c.analysis.mi_seed);
            }
            c.analysis.eval_batch = a.value("eval_batch", c.analysis.eval_batch);
        }
        if (j.contains("defenses")) {
            const json& d = j.at("defenses");
            if (!d.is_array()) throw ConfigError("'defenses' must be an array");
            int idx = 0;
            for (const auto& entry : d) {
                validate_defense_entry(entry, idx++);
                c.defenses.push_back(entry);
            }
        }
        c.output_root = j.value("output_root", c.output_root);

        c.dataset.validate();
        c.attack.validate(c.dataset.num_classes);
        c.training.validate();
        c.training.aug = aug_preset(c.training_aug);
        c.downstream.aug = aug_preset(c.downstream_aug);
        trigger::ensure_patch(c.attack.trig);
        if (c.analysis.er.k <= 0 || c.analysis.mi_k <= 0 || c.analysis.eval_batch <= 0)
            throw ConfigError("analysis parameters must be positive");
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(strf("config: ", e.what()));
    } catch (const ConfigError&) {
        throw;
    } catch (const error& e) {
        // enum-name lookups and spec validation raise plain errors; they are
        // config problems here
        throw ConfigError(strf("config: ", e.what()));
    }
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(strf("cannot open config file: ", path));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(strf("config parse error in ", path, ": ", e.what()));
    }
    return from_json(j);
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path);
    check(bool(out), "cannot write config file: ", path);
    out << to_json().dump(2) << "\n";
}

std::string ExperimentConfig::hash() const {
    json j = to_json();
    j.erase("name");
    j.erase("output_root");
    std::uint64_t h = fnv1a64(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace backlab::config
