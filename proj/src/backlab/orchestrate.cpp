#include "backlab/orchestrate.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "backlab/defense_data.hpp"
#include "backlab/defense_model.hpp"
#include "backlab/svgplot.hpp"

namespace backlab::run {

namespace fs = std::filesystem;
using nlohmann::json;

const char* kToolkitVersion = "backlab 0.1.0";

namespace {

const std::map<std::string, std::string>& producers() {
    static const std::map<std::string, std::string> m = {
        {"config", "init"},           {"poison_record", "poison"},
        {"encoder", "train"},         {"generator", "train"},
        {"dynamics", "train"},        {"dynamics_trace", "train"},
        {"classifier", "downstream"}, {"bank_train", "export"},
        {"bank_test", "export"},      {"bank_mi_clean", "export"},
        {"bank_mi_trig", "export"},   {"er", "analysis"},
        {"mi", "analysis"},           {"distances", "analysis"},
        {"metrics", "analysis"},
    };
    return m;
}

double secs_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Runs one pipeline stage, recording wall-clock; on failure the stage name
// lands in the manifest so a partial save points at the culprit.
template <class F>
void timed(RunManifest& man, const std::string& stage, F&& fn) {
    auto t0 = std::chrono::steady_clock::now();
    try {
        fn();
        man.stages.push_back({stage, secs_since(t0)});
    } catch (...) {
        man.stages.push_back({stage, secs_since(t0)});
        if (man.failed_stage.empty()) man.failed_stage = stage;
        throw;
    }
}

data::ImageDataset build_split(const config::DatasetConfig& dc, const std::string& split) {
    if (dc.kind == "synthetic") {
        int n = split == "train" ? dc.train_size : dc.test_size;
        return data::make_synthetic(dc.name, split, n, dc.num_classes, dc.image_size,
                                    derive_seed(dc.seed, "data." + split));
    }
    const std::string& mpath = split == "train" ? dc.train_manifest : dc.test_manifest;
    return data::load_manifest(mpath, split, dc.name);
}

data::ImageDataset subset_rows(const data::ImageDataset& ds, const std::vector<int>& rows) {
    data::ImageDataset out;
    out.name = ds.name;
    out.split = ds.split;
    out.num_classes = ds.num_classes;
    out.images.reserve(rows.size());
    out.labels.reserve(rows.size());
    for (int r : rows) {
        check(r >= 0 && r < ds.size(), "subset row out of range: ", r);
        out.images.push_back(ds.images[r]);
        out.labels.push_back(ds.labels[r]);
    }
    return out;
}

struct PoisonOut {
    data::ImageDataset ds;
    data::PoisonRecord rec;
    std::vector<bool> flags;
};

void fill_record_header(data::PoisonRecord& rec, const config::ExperimentConfig& cfg) {
    rec.seed = cfg.poison_seed;
    rec.trigger_kind = trigger::kind_name(cfg.attack.trig.kind);
    rec.target_class = cfg.attack.target_class;
    rec.rate = cfg.attack.rate;
    rec.selection =
        cfg.attack.selection == data::SelectionMode::target_class ? "target_class" : "all_classes";
    rec.label_mode =
        cfg.attack.label_mode == data::LabelMode::clean ? "clean" : "relabel_target";
    rec.spec_json = cfg.to_json().at("attack").at("trigger").dump();
}

// Generator triggers are sampled per batch during training; for banks, MI
// pairing, and data defenses we materialize one deterministic draw of
// residual-triggered rows at the configured rate (dirty-label).
PoisonOut synthesize_dynamic_poison(const config::ExperimentConfig& cfg,
                                    const data::ImageDataset& train_clean,
                                    nn::GeneratorNet& gen) {
    PoisonOut out{train_clean, {}, std::vector<bool>(train_clean.size(), false)};
    fill_record_header(out.rec, cfg);
    int n = train_clean.size();
    int count = data::poison_count(cfg.attack.rate, n);
    std::vector<int> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    Rng rng(derive_seed(cfg.poison_seed, "dyn.bank"));
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(std::min<std::size_t>(rows.size(), count));
    std::sort(rows.begin(), rows.end());
    for (int r : rows) {
        Image res = gen.residual_image(out.ds.images[r]);
        out.ds.images[r] = trigger::add_residual(out.ds.images[r], res);
        out.ds.labels[r] = cfg.attack.target_class;
        out.flags[r] = true;
        out.rec.entries.push_back({r, train_clean.labels[r], 0, 0, gen.cfg.amplitude});
    }
    out.rec.indices = rows;
    return out;
}

PoisonOut poison_stage(const config::ExperimentConfig& cfg, const data::ImageDataset& train_clean) {
    if (cfg.attack.trig.kind == trigger::TriggerKind::dynamic_gen) {
        // no generator exists yet; training poisons per batch
        PoisonOut out{train_clean, {}, std::vector<bool>(train_clean.size(), false)};
        fill_record_header(out.rec, cfg);
        return out;
    }
    auto [ds, rec] = data::build_poisoned_dataset(train_clean, cfg.attack, cfg.poison_seed);
    std::vector<bool> flags = rec.flags(ds.size());
    return {std::move(ds), std::move(rec), std::move(flags)};
}

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (int c = 0; c < m.cols(); ++c) r.push_back(m(i, c));
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    check(out.good(), "cannot write ", path);
    out << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    check(bool(in), "cannot open ", path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw error(strf("bad JSON in ", path, ": ", e.what()));
    }
    return j;
}

}  // namespace

// ---- manifest ---------------------------------------------------------------

std::string RunManifest::path(const std::string& key) const {
    auto it = artifacts.find(key);
    if (it == artifacts.end()) {
        std::string prod = "unknown";
        if (auto p = producers().find(key); p != producers().end())
            prod = p->second;
        else if (key.rfind("defense.", 0) == 0)
            prod = "defend";
        throw error(strf("manifest has no artifact '", key, "' (produced by the '", prod,
                         "' stage); run that stage first"));
    }
    std::string full = run_dir + "/" + it->second;
    check(fs::exists(full), "artifact '", key, "' points to a missing file: ", full);
    return full;
}

void RunManifest::add(const std::string& key, const std::string& rel_path) {
    artifacts[key] = rel_path;
}

void RunManifest::save() const {
    for (const auto& [key, rel] : artifacts)
        check(fs::exists(run_dir + "/" + rel), "manifest artifact '", key,
              "' missing on disk: ", run_dir, "/", rel);
    json j;
    j["config_hash"] = config_hash;
    j["version"] = version;
    j["run_dir"] = run_dir;
    j["artifacts"] = artifacts;
    json st = json::array();
    for (const auto& s : stages) st.push_back({{"stage", s.stage}, {"seconds", s.seconds}});
    j["stages"] = st;
    j["metrics"] = metrics;
    if (!failed_stage.empty()) j["failed_stage"] = failed_stage;
    write_json(run_dir + "/manifest.json", j);
}

RunManifest RunManifest::load(const std::string& manifest_path) {
    json j = read_json(manifest_path);
    RunManifest man;
    man.config_hash = j.value("config_hash", "");
    man.version = j.value("version", "");
    // resolve against the manifest's actual location so moved run dirs work
    man.run_dir = fs::absolute(fs::path(manifest_path)).parent_path().string();
    if (j.contains("artifacts"))
        man.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    for (const auto& s : j.value("stages", json::array()))
        man.stages.push_back({s.value("stage", ""), s.value("seconds", 0.0)});
    man.metrics = j.value("metrics", json::object());
    man.failed_stage = j.value("failed_stage", "");
    return man;
}

std::string make_run_dir(const config::ExperimentConfig& cfg) {
    std::string root = cfg.output_root;
    if (const char* env = std::getenv("BACKLAB_OUT"); env && *env) root = env;
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
    std::string base = root + "/" + cfg.name + "-" + stamp + "-" + cfg.hash().substr(0, 8);
    std::string dir = base;
    for (int i = 2; fs::exists(dir); ++i) dir = base + "-" + std::to_string(i);
    fs::create_directories(dir);
    return dir;
}

// ---- attack pipeline ----------------------------------------------------------

RunManifest run_attack(const config::ExperimentConfig& cfg) {
    RunManifest man;
    man.config_hash = cfg.hash();
    man.version = kToolkitVersion;
    man.run_dir = make_run_dir(cfg);

    bool dynamic = cfg.attack.trig.kind == trigger::TriggerKind::dynamic_gen;
    data::ImageDataset train_clean, test_clean, trig_test;
    PoisonOut pois;
    std::optional<train::TrainResult> tr;
    std::optional<nn::Classifier> clf;
    analysis::FeatureBank bank_train, bank_test, bank_mi_clean, bank_mi_trig;

    try {
        timed(man, "init", [&] {
            cfg.save(man.run_dir + "/config.json");
            man.add("config", "config.json");
        });
        timed(man, "data", [&] {
            train_clean = build_split(cfg.dataset, "train");
            test_clean = build_split(cfg.dataset, "test");
        });
        timed(man, "poison", [&] {
            pois = poison_stage(cfg, train_clean);
            pois.rec.save(man.run_dir + "/poison_record.json");
            man.add("poison_record", "poison_record.json");
        });
        timed(man, "train", [&] {
            tr.emplace(train::train(pois.ds, pois.flags, cfg.encoder, cfg.training,
                                    dynamic ? &cfg.attack : nullptr));
            train::save_encoder(man.run_dir + "/encoder.ckpt", tr->encoder);
            man.add("encoder", "encoder.ckpt");
            if (tr->generator) {
                train::save_generator(man.run_dir + "/generator.ckpt", *tr->generator);
                man.add("generator", "generator.ckpt");
            }
            tr->log.save_csv(man.run_dir + "/dynamics.csv");
            man.add("dynamics", "dynamics.csv");
            if (cfg.training.log_per_sample) {
                tr->log.save_trace(man.run_dir + "/dynamics_trace.csv");
                man.add("dynamics_trace", "dynamics_trace.csv");
            }
            if (dynamic) {
                // rewrite the record with the materialized draw
                pois = synthesize_dynamic_poison(cfg, train_clean, *tr->generator);
                pois.rec.save(man.run_dir + "/poison_record.json");
            }
        });
        timed(man, "downstream", [&] {
            if (tr->classifier)
                clf.emplace(std::move(*tr->classifier));
            else
                clf.emplace(train::fit_downstream(tr->encoder, train_clean, cfg.downstream));
            train::save_classifier(man.run_dir + "/classifier.ckpt", *clf);
            man.add("classifier", "classifier.ckpt");
        });
        timed(man, "evaluate", [&] {
            trigger::GeneratorFn genfn;
            const trigger::GeneratorFn* genp = nullptr;
            if (tr->generator) {
                genfn = [&](const Image& im) { return tr->generator->residual_image(im); };
                genp = &genfn;
            }
            trig_test = data::make_test_trigger_set(
                test_clean, cfg.attack, derive_seed(cfg.poison_seed, "trigger.test"), genp);
            auto ev = analysis::evaluate_acc_asr(*clf, test_clean, trig_test,
                                                 cfg.attack.target_class, cfg.analysis.eval_batch);
            man.metrics = {{"acc", ev.acc},
                           {"asr", ev.asr},
                           {"n_clean", ev.n_clean},
                           {"n_trigger", ev.n_trigger}};
        });
        timed(man, "export", [&] {
            int batch = cfg.analysis.eval_batch;
            bank_train = analysis::bank_from_dataset(tr->encoder, pois.ds, pois.flags, batch);
            bank_test = analysis::bank_from_dataset(tr->encoder, test_clean, {}, batch);
            bank_train.save(man.run_dir + "/bank_train.bkfb");
            bank_test.save(man.run_dir + "/bank_test.bkfb");
            man.add("bank_train", "bank_train.bkfb");
            man.add("bank_test", "bank_test.bkfb");
            if (!pois.rec.indices.empty()) {
                auto clean_sub = subset_rows(train_clean, pois.rec.indices);
                auto trig_sub = subset_rows(pois.ds, pois.rec.indices);
                bank_mi_clean = analysis::bank_from_dataset(tr->encoder, clean_sub, {}, batch);
                bank_mi_trig = analysis::bank_from_dataset(tr->encoder, trig_sub, {}, batch);
                bank_mi_clean.save(man.run_dir + "/bank_mi_clean.bkfb");
                bank_mi_trig.save(man.run_dir + "/bank_mi_trig.bkfb");
                man.add("bank_mi_clean", "bank_mi_clean.bkfb");
                man.add("bank_mi_trig", "bank_mi_trig.bkfb");
            }
        });
        timed(man, "analysis", [&] {
            auto er = analysis::entanglement_ratio(bank_train, bank_test, cfg.attack.target_class,
                                                   cfg.analysis.er);
            er.save_json(man.run_dir + "/er.json");
            man.add("er", "er.json");
            man.metrics["er_pseudo"] = er.pseudo_class_er();
            man.metrics["er_target"] = er.per_class[cfg.attack.target_class];

            if (bank_mi_clean.n > 0) {
                auto mi = analysis::representation_mi(bank_mi_clean, bank_mi_trig,
                                                      cfg.analysis.mi_k, cfg.analysis.mi_max_n,
                                                      cfg.analysis.mi_seed);
                mi.save_json(man.run_dir + "/mi.json");
                man.add("mi", "mi.json");
                man.metrics["mi_nats"] = mi.mi_nats;
                man.metrics["mi_degenerate"] = mi.degenerate;
            }

            json dj;
            try {
                dj["raw"] = matrix_to_json(analysis::pairwise_distance_matrix(bank_train, false));
                dj["normalized"] =
                    matrix_to_json(analysis::pairwise_distance_matrix(bank_train, true));
            } catch (const error& e) {
                dj["error"] = e.what();  // some group has too few rows to compare
            }
            write_json(man.run_dir + "/distances.json", dj);
            man.add("distances", "distances.json");

            if (tr->log.epochs() >= 3) {
                auto dc = analysis::compare_dynamics(tr->log);
                man.metrics["separation"] = dc.separation_score;
                man.metrics["half_life_clean"] = dc.half_life_clean;
                man.metrics["half_life_poison"] = dc.half_life_poison;
            }
            write_json(man.run_dir + "/metrics.json", man.metrics);
            man.add("metrics", "metrics.json");
        });
        man.save();
        return man;
    } catch (const std::exception& e) {
        if (man.failed_stage.empty()) man.failed_stage = "init";
        try {
            man.save();  // partial manifest for post-mortem
        } catch (...) {
        }
        throw error(strf("run_attack stage '", man.failed_stage, "': ", e.what()));
    }
}

// ---- defense dispatch -----------------------------------------------------------

namespace {

struct DefenseContext {
    data::ImageDataset train_clean, test_clean, trig_test;
    PoisonOut pois;
    std::optional<nn::GeneratorNet> gen;
    std::optional<nn::EncoderModel> enc;
    std::optional<nn::Classifier> clf;
    analysis::FeatureBank bank_train, bank_test;
};

void init_defense_context(DefenseContext& ctx, const config::ExperimentConfig& cfg,
                          const RunManifest& man) {
    ctx.train_clean = build_split(cfg.dataset, "train");
    ctx.test_clean = build_split(cfg.dataset, "test");
    if (man.artifacts.count("generator"))
        ctx.gen.emplace(train::load_generator(man.path("generator")));
    ctx.enc.emplace(train::load_encoder(man.path("encoder")));
    ctx.clf.emplace(train::load_classifier(man.path("classifier")));
    if (cfg.attack.trig.kind == trigger::TriggerKind::dynamic_gen) {
        check(ctx.gen.has_value(), "dynamic-trigger run has no generator checkpoint");
        ctx.pois = synthesize_dynamic_poison(cfg, ctx.train_clean, *ctx.gen);
    } else {
        ctx.pois = poison_stage(cfg, ctx.train_clean);
    }
    trigger::GeneratorFn genfn;
    const trigger::GeneratorFn* genp = nullptr;
    if (ctx.gen) {
        genfn = [&ctx](const Image& im) { return ctx.gen->residual_image(im); };
        genp = &genfn;
    }
    ctx.trig_test = data::make_test_trigger_set(ctx.test_clean, cfg.attack,
                                                derive_seed(cfg.poison_seed, "trigger.test"), genp);
    ctx.bank_train = analysis::FeatureBank::load(man.path("bank_train"));
    ctx.bank_test = analysis::FeatureBank::load(man.path("bank_test"));
}

train::DownstreamMode parse_downstream_mode(const std::string& s) {
    if (s == "linear_probe") return train::DownstreamMode::linear_probe;
    if (s == "fine_tune") return train::DownstreamMode::fine_tune;
    throw error(strf("unknown downstream mode '", s, "'"));
}

std::vector<double> json_grid(const json& e, const char* key, std::vector<double> def) {
    if (e.contains(key)) return e.at(key).get<std::vector<double>>();
    return def;
}

void dispatch_defense(const config::ExperimentConfig& cfg, RunManifest& man, DefenseContext& ctx,
                      const defense::EvalFn& eval_fn, const json& e, const std::string& kind,
                      const std::string& key) {
    const std::string& dir = man.run_dir;
    std::string stem = "defense_" + kind;
    for (char& ch : stem)
        if (ch == '.') ch = '_';

    if (kind == "abl") {
        auto log = train::DynamicsLog::load_csv(man.path("dynamics"));
        log.per_sample = train::DynamicsLog::load_trace(man.path("dynamics_trace"));
        defense::AblParams p;
        if (e.contains("rate_grid")) p.rate_grid = e.at("rate_grid").get<std::vector<double>>();
        p.isolation_rate = e.value("isolation_rate", p.isolation_rate);
        p.early_epochs = e.value("early_epochs", p.early_epochs);
        auto rep = defense::abl_isolate(log, ctx.pois.flags, p);
        check(!log.clean_loss.empty(), "dynamics log has no epochs");
        double gamma = defense::abl_gamma(log.clean_loss.front(), log.clean_loss.back(),
                                          e.value("gamma_ratio", 0.5));
        nn::Classifier work = ctx.clf->clone();
        defense::abl_unlearn(work, ctx.pois.ds, rep.flagged, gamma, e.value("unlearn_epochs", 1),
                             e.value("unlearn_lr", 5e-4),
                             derive_seed(cfg.poison_seed, "abl.unlearn"));
        auto [acc, asr] = eval_fn(work);
        rep.aux["gamma"] = gamma;
        rep.aux["post_unlearn_acc"] = acc;
        rep.aux["post_unlearn_asr"] = asr;
        rep.save_json(dir + "/" + stem + ".json");
        man.add(key, stem + ".json");
    } else if (kind == "activation_clustering") {
        defense::ACParams p;
        p.pca_dim = e.value("pca_dim", p.pca_dim);
        p.kmeans_iters = e.value("kmeans_iters", p.kmeans_iters);
        p.seed = e.value("seed", p.seed);
        auto rep = defense::activation_clustering(ctx.bank_train, ctx.bank_train.poison, p);
        rep.save_json(dir + "/" + stem + ".json");
        man.add(key, stem + ".json");
    } else if (kind == "scan") {
        defense::ScanParams p;
        p.cov_reg = e.value("cov_reg", p.cov_reg);
        p.em_iters = e.value("em_iters", p.em_iters);
        p.class_threshold = e.value("class_threshold", p.class_threshold);
        if (e.contains("fpr_grid")) p.fpr_grid = e.at("fpr_grid").get<std::vector<double>>();
        auto rep = defense::scan_lite(ctx.bank_train, ctx.bank_test, ctx.bank_train.poison, p);
        rep.save_json(dir + "/" + stem + ".json");
        man.add(key, stem + ".json");
    } else if (kind == "strip") {
        defense::StripParams p;
        p.n_overlays = e.value("n_overlays", p.n_overlays);
        p.alpha = e.value("alpha", p.alpha);
        if (e.contains("fpr_grid")) p.fpr_grid = e.at("fpr_grid").get<std::vector<double>>();
        p.operating_row = e.value("operating_row", p.operating_row);
        p.seed = e.value("seed", p.seed);
        p.batch = e.value("batch", p.batch);
        int max_inputs = e.value("max_inputs", 256);
        // screen every poisoned row plus a clean sample; overlays and
        // calibration come from disjoint halves of the clean test set
        std::vector<int> rows, clean_rows;
        for (int i = 0; i < ctx.pois.ds.size(); ++i)
            (ctx.pois.flags[i] ? rows : clean_rows).push_back(i);
        Rng rng(derive_seed(p.seed, "strip.rows"));
        std::shuffle(clean_rows.begin(), clean_rows.end(), rng);
        for (int r : clean_rows) {
            if (static_cast<int>(rows.size()) >= max_inputs) break;
            rows.push_back(r);
        }
        std::sort(rows.begin(), rows.end());
        std::vector<bool> truth_sub;
        truth_sub.reserve(rows.size());
        for (int r : rows) truth_sub.push_back(ctx.pois.flags[r]);
        std::vector<int> ov, cal;
        for (int i = 0; i < ctx.test_clean.size(); ++i) (i % 2 ? cal : ov).push_back(i);
        auto rep = defense::strip_detect(*ctx.clf, subset_rows(ctx.pois.ds, rows), truth_sub,
                                         subset_rows(ctx.test_clean, ov),
                                         subset_rows(ctx.test_clean, cal), p);
        rep.aux["rows"] = rows;
        rep.save_json(dir + "/" + stem + ".json");
        man.add(key, stem + ".json");
    } else if (kind == "bdd") {
        defense::BddParams p;
        p.threshold = e.value("threshold", p.threshold);
        p.use_percentile = e.value("use_percentile", p.use_percentile);
        p.percentile = e.value("percentile", p.percentile);
        p.batch = e.value("batch", p.batch);
        auto rep = defense::bdd_confidence_filter(*ctx.clf, ctx.pois.ds, ctx.pois.flags,
                                                  cfg.attack.target_class, p);
        rep.save_json(dir + "/" + stem + ".json");
        man.add(key, stem + ".json");
    } else if (kind == "density") {
        defense::ClusteringParams p;
        p.eps = e.value("eps", 0.0);
        p.n_min = e.value("n_min", p.n_min);
        p.top_j = e.value("top_j", p.top_j);
        json knee_note;
        if (p.eps <= 0) {
            auto knee = defense::k_distance_knee(ctx.bank_train, p.n_min);
            p.eps = knee.epsilon;
            knee_note = {{"epsilon", knee.epsilon},
                         {"index", knee.index},
                         {"degenerate", knee.degenerate}};
        }
        auto rep = defense::density_filter(ctx.bank_train, ctx.bank_train.poison, p);
        if (!knee_note.is_null()) rep.aux["knee"] = knee_note;
        rep.save_json(dir + "/" + stem + ".json");
        man.add(key, stem + ".json");
    } else if (kind == "fine_prune") {
        int maxc = e.value("max_channels", 0);
        if (maxc <= 0) maxc = ctx.clf->enc.backbone.feature_dim();
        auto rep = defense::fine_prune(*ctx.clf, ctx.test_clean, maxc, e.value("stride", 10),
                                       eval_fn);
        rep.save_json(dir + "/" + stem + ".json");
        rep.save_csv(dir + "/" + stem + ".csv");
        man.add(key, stem + ".json");
        man.add(key + ".csv", stem + ".csv");
    } else if (kind == "clp") {
        defense::EnsembleParams grid_defaults;
        std::vector<double> grid = json_grid(e, "u_grid", grid_defaults.u_grid);
        defense::SgParams sg{e.value("window", 5), e.value("order", 2)};
        auto rep = defense::clp_knee(*ctx.clf, grid, eval_fn, sg);
        rep.save_json(dir + "/" + stem + ".json");
        rep.save_csv(dir + "/" + stem + ".csv");
        man.add(key, stem + ".json");
        man.add(key + ".csv", stem + ".csv");
    } else if (kind == "neural_cleanse") {
        defense::NCParams p;
        p.lambda_init = e.value("lambda", p.lambda_init);
        p.steps = e.value("steps", p.steps);
        p.lr = e.value("lr", p.lr);
        p.batch = e.value("batch", p.batch);
        p.seed = e.value("seed", p.seed);
        p.anomaly_threshold = e.value("anomaly_threshold", p.anomaly_threshold);
        p.success_target = e.value("success_target", p.success_target);
        int pool_n = e.value("pool", 64);
        std::vector<int> rows(ctx.test_clean.size());
        std::iota(rows.begin(), rows.end(), 0);
        Rng rng(derive_seed(p.seed, "nc.pool"));
        std::shuffle(rows.begin(), rows.end(), rng);
        rows.resize(std::min<std::size_t>(rows.size(), pool_n));
        std::sort(rows.begin(), rows.end());
        auto res = defense::neural_cleanse(*ctx.clf, subset_rows(ctx.test_clean, rows), p);
        fs::create_directories(dir + "/nc");
        res.save(dir + "/nc");
        man.add(key, "nc/nc.json");
    } else if (kind == "fine_tune") {
        config::DatasetConfig b = cfg.dataset;
        b.kind = "synthetic";  // auxiliary corpus, disjoint by seed
        b.name = cfg.dataset.name + "-b";
        b.train_size = e.value("b_train_size", 1000);
        b.test_size = e.value("b_test_size", 400);
        b.num_classes = e.value("b_num_classes", cfg.dataset.num_classes);
        b.seed = e.value("b_seed", std::uint64_t(77));
        auto train_b = build_split(b, "train");
        auto test_b = build_split(b, "test");
        trigger::GeneratorFn genfn;
        const trigger::GeneratorFn* genp = nullptr;
        if (ctx.gen) {
            genfn = [&ctx](const Image& im) { return ctx.gen->residual_image(im); };
            genp = &genfn;
        }
        auto trig_b = data::make_test_trigger_set(test_b, cfg.attack,
                                                  derive_seed(cfg.poison_seed, "trigger.b"), genp);
        train::DownstreamConfig dc = cfg.downstream;
        dc.epochs = e.value("epochs", dc.epochs);
        dc.lr = e.value("lr", dc.lr);
        if (e.contains("mode")) dc.mode = parse_downstream_mode(e.at("mode").get<std::string>());
        auto out = defense::fine_tune_defense(*ctx.enc, train_b, test_b, &trig_b, dc);
        json j = {{"clean_acc", out.clean_acc},
                  {"triggered_acc", out.triggered_acc},
                  {"drop", out.drop},
                  {"b_dataset",
                   {{"name", b.name},
                    {"train_size", b.train_size},
                    {"test_size", b.test_size},
                    {"seed", b.seed}}}};
        write_json(dir + "/" + stem + ".json", j);
        man.add(key, stem + ".json");
    } else if (kind == "ensemble") {
        defense::EnsembleParams p;
        p.filter.eps = e.value("eps", 0.0);
        p.filter.n_min = e.value("n_min", p.filter.n_min);
        p.filter.top_j = e.value("top_j", p.filter.top_j);
        p.u_grid = json_grid(e, "u_grid", p.u_grid);
        p.sg.window = e.value("window", p.sg.window);
        p.sg.order = e.value("order", p.sg.order);
        if (p.filter.eps <= 0)
            p.filter.eps = defense::k_distance_knee(ctx.bank_train, p.filter.n_min).epsilon;
        int retrain_epochs = e.value("retrain_epochs", cfg.training.epochs);
        bool dynamic = cfg.attack.trig.kind == trigger::TriggerKind::dynamic_gen;
        defense::RetrainFn retrain = [&, retrain_epochs, dynamic](const std::vector<int>& keep) {
            auto sub = subset_rows(ctx.pois.ds, keep);
            std::vector<bool> subflags;
            subflags.reserve(keep.size());
            for (int r : keep) subflags.push_back(ctx.pois.flags[r]);
            train::TrainConfig tc = cfg.training;
            tc.epochs = retrain_epochs;
            tc.log_per_sample = false;
            tc.seed = derive_seed(cfg.training.seed, "ensemble.retrain");
            auto tr2 = train::train(sub, subflags, cfg.encoder, tc, dynamic ? &cfg.attack : nullptr);
            if (tr2.classifier) return std::move(*tr2.classifier);
            return train::fit_downstream(tr2.encoder, ctx.train_clean, cfg.downstream);
        };
        std::pair<double, double> pre{man.metrics.value("acc", 0.0), man.metrics.value("asr", 0.0)};
        auto out = defense::ensemble_defense(ctx.bank_train, ctx.bank_train.poison, pre, retrain,
                                             eval_fn, p);
        out.save_json(dir + "/" + stem + ".json");
        man.add(key, stem + ".json");
    } else {
        throw error(strf("unknown defense kind '", kind, "'"));
    }
}

}  // namespace

void run_defense(const config::ExperimentConfig& cfg, RunManifest& man) {
    if (cfg.defenses.empty()) return;
    DefenseContext ctx;
    try {
        timed(man, "defend.load", [&] { init_defense_context(ctx, cfg, man); });
        defense::EvalFn eval_fn = [&ctx, target = cfg.attack.target_class,
                                   batch = cfg.analysis.eval_batch](nn::Classifier& c) {
            auto r = analysis::evaluate_acc_asr(c, ctx.test_clean, ctx.trig_test, target, batch);
            return std::make_pair(r.acc, r.asr);
        };
        for (std::size_t i = 0; i < cfg.defenses.size(); ++i) {
            const json& e = cfg.defenses[i];
            std::string kind = e.at("kind").get<std::string>();
            std::string key = "defense." + kind;
            if (man.artifacts.count(key)) key += "_" + std::to_string(i);
            timed(man, "defend." + kind,
                  [&] { dispatch_defense(cfg, man, ctx, eval_fn, e, kind, key); });
        }
        man.save();
    } catch (const std::exception& e) {
        try {
            man.save();
        } catch (...) {
        }
        throw error(strf("run_defense stage '", man.failed_stage, "': ", e.what()));
    }
}

// ---- re-analysis ------------------------------------------------------------------

json analyze_manifest(const RunManifest& man) {
    auto cfg = config::ExperimentConfig::load(man.path("config"));
    auto bank_train = analysis::FeatureBank::load(man.path("bank_train"));
    auto bank_test = analysis::FeatureBank::load(man.path("bank_test"));
    auto er = analysis::entanglement_ratio(bank_train, bank_test, cfg.attack.target_class,
                                           cfg.analysis.er);
    er.save_json(man.run_dir + "/er.json");
    json out;
    out["config_hash"] = man.config_hash;
    out["er"] = er.per_class;
    out["er_pseudo"] = er.pseudo_class_er();
    out["bank_counts"] = er.bank_counts;
    if (man.artifacts.count("bank_mi_clean")) {
        auto bc = analysis::FeatureBank::load(man.path("bank_mi_clean"));
        auto bt = analysis::FeatureBank::load(man.path("bank_mi_trig"));
        auto mi = analysis::representation_mi(bc, bt, cfg.analysis.mi_k, cfg.analysis.mi_max_n,
                                              cfg.analysis.mi_seed);
        mi.save_json(man.run_dir + "/mi.json");
        out["mi_nats"] = mi.mi_nats;
        out["mi_degenerate"] = mi.degenerate;
    }
    return out;
}

// ---- report -----------------------------------------------------------------------

namespace {

std::string artifact_slug(std::string key) {
    for (char& c : key)
        if (c == '.') c = '-';
    return key;
}

void prune_chart(const json& pj, const std::string& title, const std::string& path) {
    plot::Series acc{"acc", {}, {}}, asr{"asr", {}, {}};
    for (const auto& r : pj.at("rows")) {
        acc.x.push_back(r.at("x").get<double>());
        acc.y.push_back(r.at("acc").get<double>());
        asr.x.push_back(r.at("x").get<double>());
        asr.y.push_back(r.at("asr").get<double>());
    }
    plot::LineChart ch;
    ch.title = title;
    ch.xlabel = "sweep variable";
    ch.ylabel = "rate";
    ch.markers = true;
    ch.series = {acc, asr};
    ch.save(path);
}

}  // namespace

void emit_report(const std::vector<std::string>& manifest_paths, const std::string& out_dir) {
    check(!manifest_paths.empty(), "report needs at least one manifest");
    fs::create_directories(out_dir);
    std::vector<RunManifest> mans;
    mans.reserve(manifest_paths.size());
    for (const auto& p : manifest_paths) mans.push_back(RunManifest::load(p));

    std::ostringstream md;
    md << "# Run report\n\n";
    md << "| run | hash | acc | asr | ER(poison) | MI (nats) | separation |\n";
    md << "|---|---|---|---|---|---|---|\n";
    auto cell = [](const json& m, const char* k) {
        return m.contains(k) ? format_double(m[k].get<double>(), 4) : std::string("-");
    };
    for (const auto& m : mans) {
        std::string base = fs::path(m.run_dir).filename().string();
        md << "| " << base << " | " << m.config_hash << " | " << cell(m.metrics, "acc") << " | "
           << cell(m.metrics, "asr") << " | " << cell(m.metrics, "er_pseudo") << " | "
           << cell(m.metrics, "mi_nats") << " | " << cell(m.metrics, "separation") << " |\n";
    }
    md << "\n";

    for (const auto& m : mans) {
        std::string base = fs::path(m.run_dir).filename().string();
        md << "## " << base << "\n\n";
        if (!m.failed_stage.empty()) md << "**failed at stage:** " << m.failed_stage << "\n\n";

        if (m.artifacts.count("dynamics")) {
            auto log = train::DynamicsLog::load_csv(m.path("dynamics"));
            plot::Series cl{"clean", {}, {}}, po{"poison", {}, {}};
            for (int i = 0; i < log.epochs(); ++i) {
                cl.x.push_back(log.epoch[i]);
                cl.y.push_back(log.clean_loss[i]);
                po.x.push_back(log.epoch[i]);
                po.y.push_back(log.poison_loss[i]);
            }
            plot::LineChart ch;
            ch.title = base + " loss dynamics";
            ch.xlabel = "epoch";
            ch.ylabel = "mean loss";
            ch.series = {cl, po};
            std::string rel = base + "-dynamics.svg";
            ch.save(out_dir + "/" + rel);
            md << "![dynamics](" << rel << ")\n";
        }
        if (m.artifacts.count("er")) {
            json ej = read_json(m.path("er"));
            auto er = ej.at("er").get<std::vector<double>>();
            plot::BarChart bc;
            bc.title = base + " entanglement ratio";
            bc.xlabel = "class";
            bc.ylabel = "ER";
            for (std::size_t i = 0; i + 1 < er.size(); ++i) bc.labels.push_back(std::to_string(i));
            bc.labels.push_back("poison");
            bc.groups = {er};
            bc.group_names = {"ER"};
            std::string rel = base + "-er.svg";
            bc.save(out_dir + "/" + rel);
            md << "![er](" << rel << ")\n";
        }
        bool any_defense = false;
        for (const auto& [akey, rel] : m.artifacts) {
            (void)rel;
            if (akey.rfind("defense.", 0) != 0) continue;
            if (akey.size() > 4 && akey.substr(akey.size() - 4) == ".csv") continue;
            json dj = read_json(m.path(akey));
            if (!any_defense) {
                md << "| defense | flagged | detail |\n|---|---|---|\n";
                any_defense = true;
            }
            std::string slug = artifact_slug(akey);
            if (dj.contains("rows") && dj.contains("chosen")) {
                // pruning sweep (fine_prune / clp)
                std::string rel_svg = base + "-" + slug + ".svg";
                prune_chart(dj, base + " " + akey, out_dir + "/" + rel_svg);
                md << "| " << akey << " | - | chosen x=" << format_double(
                       dj["chosen"].value("x", 0.0), 4)
                   << " acc=" << format_double(dj["chosen"].value("acc", 0.0), 4)
                   << " asr=" << format_double(dj["chosen"].value("asr", 0.0), 4) << " ![plot]("
                   << rel_svg << ") |\n";
            } else if (dj.contains("flagged")) {
                std::size_t nflag = dj["flagged"].size();
                std::string detail;
                if (dj.contains("aux") && dj["aux"].contains("hist_poison") &&
                    dj["aux"].contains("hist_clean_target")) {
                    plot::BarChart bc;
                    bc.title = base + " confidence histogram";
                    bc.xlabel = "confidence bin";
                    bc.ylabel = "count";
                    auto hp = dj["aux"]["hist_poison"].get<std::vector<double>>();
                    auto hc = dj["aux"]["hist_clean_target"].get<std::vector<double>>();
                    for (std::size_t b = 0; b < hp.size(); ++b)
                        bc.labels.push_back(format_double((b + 0.5) / hp.size(), 2));
                    bc.groups = {hp, hc};
                    bc.group_names = {"poison", "clean target"};
                    std::string rel_svg = base + "-" + slug + "-hist.svg";
                    bc.save(out_dir + "/" + rel_svg);
                    detail = "![hist](" + rel_svg + ")";
                }
                md << "| " << akey << " | " << nflag << " | " << detail << " |\n";
            } else if (dj.contains("pre") && dj.contains("final")) {
                // ensemble outcome
                md << "| " << akey << " | - | asr " << format_double(
                       dj["pre"].value("asr", 0.0), 4)
                   << " -> " << format_double(dj["final"].value("asr", 0.0), 4) << " |\n";
            } else {
                md << "| " << akey << " | - | - |\n";
            }
        }
        md << "\n";
    }
    std::ofstream out(out_dir + "/report.md");
    check(out.good(), "cannot write report.md under ", out_dir);
    out << md.str();
}

// ---- sweeps -----------------------------------------------------------------------

analysis::SweepPoint evaluate_attack_point(const config::ExperimentConfig& cfg,
                                           const data::ImageDataset& train_clean,
                                           const data::ImageDataset& test_clean) {
    analysis::SweepPoint pt;
    pt.strength = trigger::get_strength(cfg.attack.trig);
    bool dynamic = cfg.attack.trig.kind == trigger::TriggerKind::dynamic_gen;

    PoisonOut pois = poison_stage(cfg, train_clean);
    auto tr = train::train(pois.ds, pois.flags, cfg.encoder, cfg.training,
                           dynamic ? &cfg.attack : nullptr);
    if (dynamic) {
        check(tr.generator.has_value(), "dynamic training produced no generator");
        pois = synthesize_dynamic_poison(cfg, train_clean, *tr.generator);
    }
    std::optional<nn::Classifier> clf;
    if (tr.classifier)
        clf.emplace(std::move(*tr.classifier));
    else
        clf.emplace(train::fit_downstream(tr.encoder, train_clean, cfg.downstream));

    trigger::GeneratorFn genfn;
    const trigger::GeneratorFn* genp = nullptr;
    if (tr.generator) {
        genfn = [&tr](const Image& im) { return tr.generator->residual_image(im); };
        genp = &genfn;
    }
    auto trig_test = data::make_test_trigger_set(test_clean, cfg.attack,
                                                 derive_seed(cfg.poison_seed, "trigger.test"), genp);
    auto ev = analysis::evaluate_acc_asr(*clf, test_clean, trig_test, cfg.attack.target_class,
                                         cfg.analysis.eval_batch);
    pt.acc = ev.acc;
    pt.asr = ev.asr;

    int batch = cfg.analysis.eval_batch;
    auto bank_train = analysis::bank_from_dataset(tr.encoder, pois.ds, pois.flags, batch);
    auto bank_test = analysis::bank_from_dataset(tr.encoder, test_clean, {}, batch);
    auto er =
        analysis::entanglement_ratio(bank_train, bank_test, cfg.attack.target_class, cfg.analysis.er);
    pt.er_pseudo = er.pseudo_class_er();

    if (!pois.rec.indices.empty()) {
        auto clean_sub = subset_rows(train_clean, pois.rec.indices);
        auto trig_sub = subset_rows(pois.ds, pois.rec.indices);
        auto bc = analysis::bank_from_dataset(tr.encoder, clean_sub, {}, batch);
        auto bt = analysis::bank_from_dataset(tr.encoder, trig_sub, {}, batch);
        auto mi = analysis::representation_mi(bc, bt, cfg.analysis.mi_k, cfg.analysis.mi_max_n,
                                              cfg.analysis.mi_seed);
        pt.mi_nats = mi.mi_nats;
    }
    pt.ok = true;
    return pt;
}

std::vector<analysis::SweepPoint> run_sweep(const config::ExperimentConfig& cfg,
                                            const std::vector<double>& grid,
                                            const std::string& out_dir) {
    check(!grid.empty(), "sweep needs a non-empty strength grid");
    fs::create_directories(out_dir);
    auto train_clean = build_split(cfg.dataset, "train");
    auto test_clean = build_split(cfg.dataset, "test");
    auto points = analysis::trigger_strength_sweep(grid, [&](double s) {
        config::ExperimentConfig c = cfg;
        trigger::set_strength(c.attack.trig, s);
        trigger::ensure_patch(c.attack.trig);
        return evaluate_attack_point(c, train_clean, test_clean);
    });
    analysis::save_sweep_csv(points, out_dir + "/sweep.csv");

    plot::Series asr{"asr", {}, {}}, acc{"acc", {}, {}}, erc{"ER(poison)", {}, {}};
    for (const auto& p : points) {
        if (!p.ok) continue;
        asr.x.push_back(p.strength);
        asr.y.push_back(p.asr);
        acc.x.push_back(p.strength);
        acc.y.push_back(p.acc);
        erc.x.push_back(p.strength);
        erc.y.push_back(p.er_pseudo);
    }
    plot::LineChart ch;
    ch.title = cfg.name + " trigger-strength sweep";
    ch.xlabel = "strength";
    ch.ylabel = "rate";
    ch.markers = true;
    ch.series = {asr, acc, erc};
    ch.save(out_dir + "/sweep.svg");
    return points;
}

std::vector<double> default_strength_grid(trigger::TriggerKind kind) {
    switch (kind) {
        case trigger::TriggerKind::universal: return {0, 1, 2, 3, 5, 7};
        case trigger::TriggerKind::functional: return {0, 10, 20, 50, 100, 150};
        case trigger::TriggerKind::dynamic_gen: return {0, 2, 4, 8, 16, 32};
    }
    throw error("unknown trigger kind in default_strength_grid");
}

}  // namespace backlab::run
