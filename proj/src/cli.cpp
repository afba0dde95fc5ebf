#include "trajmoe/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "trajmoe/eval.hpp"

namespace trajmoe {

namespace {

std::string iso_timestamp() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

// Every run directory gets a manifest before any work starts; it is the
// one output that carries timestamps, so reports stay bit-reproducible.
class RunManifest {
  public:
    RunManifest(const std::vector<std::string>& args, std::uint64_t seed,
                nlohmann::json config, std::string out_dir)
        : path_(out_dir + "/manifest.json") {
        j_["tool"] = kToolVersion;
        j_["command"] = args;
        j_["seed"] = seed;
        j_["config"] = std::move(config);
        j_["out_dir"] = out_dir;
        j_["started_at"] = iso_timestamp();
        std::filesystem::create_directories(out_dir);
        write();
    }

    void add_artifact(const std::string& key, const std::string& path) {
        j_["artifacts"][key] = path;
        write();
    }

    void complete() {
        j_["completed_at"] = iso_timestamp();
        write();
    }

  private:
    void write() const {
        std::ofstream out(path_, std::ios::binary);
        if (!out) throw std::runtime_error("manifest: cannot open " + path_);
        out << j_.dump(2) << "\n";
    }

    std::string path_;
    nlohmann::json j_;
};

std::string default_out_dir(std::uint64_t seed) {
    const char* root = std::getenv("TRAJMOE_OUT_ROOT");
    const std::string base = root && *root ? root : "runs";
    return base + "/" + iso_timestamp() + "-seed" + std::to_string(seed);
}

struct TrainFlags {
    TrainConfig cfg;
    std::string config_file;
    std::string routing = "hard";
    std::string loss_positions = "all";
    std::string variant = "full";

    void add_options(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "JSON config file (flags override its values)");
        cmd->add_option("--seed", cfg.seed, "root seed for the run");
        cmd->add_option("--lr", cfg.lr, "learning rate");
        cmd->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
        cmd->add_option("--batch", cfg.batch_size, "mini-batch size");
        cmd->add_option("--epochs", cfg.max_epochs, "maximum training epochs");
        cmd->add_option("--patience", cfg.patience, "early-stopping patience");
        cmd->add_option("--dim", cfg.model.dim, "model dimension");
        cmd->add_option("--heads", cfg.model.heads, "attention heads");
        cmd->add_option("--layers", cfg.model.layers, "SAMoE layers");
        cmd->add_option("--seq-len", cfg.model.seq_len, "padded trajectory length T");
        cmd->add_option("--cross-layers", cfg.model.cross_layers, "DCN cross layers");
        cmd->add_flag("--cross-matrix", cfg.model.cross_matrix,
                      "matrix-valued cross weights instead of scalar gates");
        cmd->add_flag("--share-attention", cfg.model.share_stream_attention,
                      "share attention parameters across the four streams");
        cmd->add_flag("--proportional-sampling", cfg.city_sampling_proportional,
                      "sample cities proportional to size instead of uniformly");
        cmd->add_option("--routing", routing, "routing mode: hard|soft")
            ->check(CLI::IsMember({"hard", "soft"}));
        cmd->add_option("--loss-positions", loss_positions,
                        "positions contributing to the loss: all|last")
            ->check(CLI::IsMember({"all", "last"}));
        cmd->add_option("--variant", variant, "ablation variant");
        cmd->add_option("--val-fraction", cfg.val_fraction, "validation split fraction");
        cmd->add_option("--test-fraction", cfg.test_fraction, "test split fraction");
    }

    // File values first, then any flag the user actually passed on top.
    // With variant_is_sweep the --variant flag selects which variants to
    // run rather than the model configuration.
    TrainConfig resolve(CLI::App* cmd, bool variant_is_sweep = false) {
        TrainConfig out = cfg;
        if (!config_file.empty()) {
            std::ifstream in(config_file);
            if (!in) throw std::runtime_error("config: cannot open " + config_file);
            nlohmann::json j;
            try {
                in >> j;
            } catch (const nlohmann::json::exception& e) {
                throw std::runtime_error("config: parse error in " + config_file + ": " +
                                         e.what());
            }
            out = TrainConfig::from_json(j);
            auto set = [&](const char* flag) { return cmd->count(flag) > 0; };
            if (set("--seed")) out.seed = cfg.seed;
            if (set("--lr")) out.lr = cfg.lr;
            if (set("--weight-decay")) out.weight_decay = cfg.weight_decay;
            if (set("--batch")) out.batch_size = cfg.batch_size;
            if (set("--epochs")) out.max_epochs = cfg.max_epochs;
            if (set("--patience")) out.patience = cfg.patience;
            if (set("--dim")) out.model.dim = cfg.model.dim;
            if (set("--heads")) out.model.heads = cfg.model.heads;
            if (set("--layers")) out.model.layers = cfg.model.layers;
            if (set("--seq-len")) out.model.seq_len = cfg.model.seq_len;
            if (set("--cross-layers")) out.model.cross_layers = cfg.model.cross_layers;
            if (set("--cross-matrix")) out.model.cross_matrix = cfg.model.cross_matrix;
            if (set("--share-attention"))
                out.model.share_stream_attention = cfg.model.share_stream_attention;
            if (set("--proportional-sampling"))
                out.city_sampling_proportional = cfg.city_sampling_proportional;
            if (set("--val-fraction")) out.val_fraction = cfg.val_fraction;
            if (set("--test-fraction")) out.test_fraction = cfg.test_fraction;
            if (!set("--routing")) routing = out.model.routing == RoutingMode::Soft ? "soft" : "hard";
            if (!set("--loss-positions")) loss_positions = out.loss_all_positions ? "all" : "last";
            if (!set("--variant") && !variant_is_sweep) variant = to_string(out.model.ablation);
        }
        out.model.routing = routing == "soft" ? RoutingMode::Soft : RoutingMode::Hard;
        out.loss_all_positions = loss_positions == "all";
        if (!variant_is_sweep) out.model.ablation = ablation_from_string(variant);
        out.validate();
        return out;
    }
};

int cmd_gen_data(const std::vector<std::string>& args, GeneratorConfig gen, std::string out_dir) {
    gen.validate();
    if (out_dir.empty()) out_dir = default_out_dir(gen.seed);
    RunManifest manifest(args, gen.seed, gen.to_json(), out_dir);
    Dataset ds = generate_dataset(gen);
    save_dataset(ds, out_dir);
    manifest.add_artifact("dataset", out_dir);
    manifest.complete();
    std::cout << "wrote " << ds.cities.size() << " cities under " << out_dir << "\n";
    return 0;
}

// Fresh models adopt the dataset's POI category count; checkpoint-driven
// commands keep the checkpoint's and let prepare_city_datasets reject a
// mismatched dataset.
std::vector<CityDataset> load_and_prepare(const std::string& data_dir, TrainConfig& cfg,
                                          bool adopt_categories) {
    Dataset ds = load_dataset(data_dir);
    if (adopt_categories) cfg.model.poi_categories = dataset_poi_categories(ds);
    return prepare_city_datasets(ds, cfg, cfg.seed);
}

int cmd_pretrain(const std::vector<std::string>& args, TrainConfig cfg,
                 const std::string& data_dir, std::vector<int> city_ids, std::string out_dir) {
    auto data = load_and_prepare(data_dir, cfg, /*adopt_categories=*/true);
    if (out_dir.empty()) out_dir = default_out_dir(cfg.seed);
    RunManifest manifest(args, cfg.seed, cfg.to_json(), out_dir);
    if (!city_ids.empty()) {
        std::vector<CityDataset> picked;
        for (int id : city_ids) {
            if (id < 0 || id >= static_cast<int>(data.size()))
                throw std::runtime_error("pretrain: city " + std::to_string(id) +
                                         " not in dataset");
            picked.push_back(std::move(data[id]));
        }
        data = std::move(picked);
    }
    Checkpoint ckpt = pretrain(data, cfg);
    const std::string ckpt_path = out_dir + "/checkpoint.json";
    ckpt.save(ckpt_path);
    manifest.add_artifact("checkpoint", ckpt_path);
    manifest.complete();
    for (const TrainRecord& r : ckpt.history)
        std::cout << r.phase << " epoch " << r.epoch << ": train " << r.train_loss << " val "
                  << r.val_loss << "\n";
    std::cout << "checkpoint: " << ckpt_path << "\n";
    return 0;
}

int cmd_finetune(const std::vector<std::string>& args, const std::string& ckpt_path,
                 const std::string& data_dir, int city, double fraction, int epochs,
                 std::string out_dir) {
    Checkpoint start = Checkpoint::load(ckpt_path);
    if (out_dir.empty()) out_dir = default_out_dir(start.config.seed);
    RunManifest manifest(args, start.config.seed, start.config.to_json(), out_dir);
    auto data = load_and_prepare(data_dir, start.config, /*adopt_categories=*/false);
    if (city < 0 || city >= static_cast<int>(data.size()))
        throw std::runtime_error("finetune: city " + std::to_string(city) + " not in dataset");
    Checkpoint tuned = finetune(start, data[city], fraction, epochs);
    const std::string tuned_path = out_dir + "/checkpoint.json";
    tuned.save(tuned_path);
    manifest.add_artifact("checkpoint", tuned_path);
    manifest.complete();
    std::cout << "checkpoint: " << tuned_path << "\n";
    return 0;
}

int cmd_eval(const std::vector<std::string>& args, const std::string& ckpt_path,
             const std::string& data_dir, int city, int extra_k, std::string out_dir) {
    Checkpoint ckpt = Checkpoint::load(ckpt_path);
    if (out_dir.empty()) out_dir = default_out_dir(ckpt.config.seed);
    RunManifest manifest(args, ckpt.config.seed, ckpt.config.to_json(), out_dir);
    auto data = load_and_prepare(data_dir, ckpt.config, /*adopt_categories=*/false);
    if (city < 0 || city >= static_cast<int>(data.size()))
        throw std::runtime_error("eval: city " + std::to_string(city) + " not in dataset");
    Model model = ckpt.instantiate();
    EvalReport rep = evaluate(model, data[city].city, data[city].test, ckpt.config);
    write_reports_csv({rep}, out_dir + "/report.csv");
    manifest.add_artifact("report", out_dir + "/report.csv");
    manifest.complete();
    std::cout << "city " << rep.city_id << ": acc@1 " << rep.acc1 << " acc@3 " << rep.acc3
              << " acc@5 " << rep.acc5 << " over " << rep.samples << " samples ("
              << rep.wall_clock_sec << "s)\n";
    if (extra_k > 0 && extra_k != 1 && extra_k != 3 && extra_k != 5)
        std::cout << "acc@" << extra_k << " "
                  << evaluate_acc_at_k(model, data[city].city, data[city].test, ckpt.config,
                                       extra_k)
                  << "\n";
    return 0;
}

int cmd_ablate(const std::vector<std::string>& args, TrainConfig cfg,
               const std::string& data_dir, int city, const std::string& variant,
               std::string out_dir) {
    if (out_dir.empty()) out_dir = default_out_dir(cfg.seed);
    RunManifest manifest(args, cfg.seed, cfg.to_json(), out_dir);
    std::vector<AblationVariant> variants;
    if (variant == "all")
        variants = {AblationVariant::Full,          AblationVariant::RemoveAdaptedGate,
                    AblationVariant::RemoveTimeGate, AblationVariant::RemoveTrajGate,
                    AblationVariant::RemoveMoeKeepFused, AblationVariant::RemoveFusedExpert};
    else
        variants = {ablation_from_string(variant)};

    std::ofstream out;
    std::filesystem::create_directories(out_dir);
    out.open(out_dir + "/ablation.csv", std::ios::binary);
    if (!out) throw std::runtime_error("ablate: cannot open " + out_dir + "/ablation.csv");
    out << "variant,city,samples,acc_at_1,acc_at_3,acc_at_5\n";
    for (AblationVariant v : variants) {
        TrainConfig acfg = cfg;
        acfg.model = apply_ablation(acfg.model, v);
        auto data = load_and_prepare(data_dir, acfg, /*adopt_categories=*/true);
        if (city < 0 || city >= static_cast<int>(data.size()))
            throw std::runtime_error("ablate: city " + std::to_string(city) + " not in dataset");
        std::vector<CityDataset> single{std::move(data[city])};
        Checkpoint ckpt = pretrain(single, acfg);
        Model model = ckpt.instantiate();
        EvalReport rep = evaluate(model, single[0].city, single[0].test, acfg);
        out << to_string(v) << ',' << rep.city_id << ',' << rep.samples << ',' << rep.acc1 << ','
            << rep.acc3 << ',' << rep.acc5 << "\n";
        std::cout << to_string(v) << ": acc@1 " << rep.acc1 << "\n";
    }
    manifest.add_artifact("ablation", out_dir + "/ablation.csv");
    manifest.complete();
    return 0;
}

int cmd_gate_stats(const std::vector<std::string>& args, const std::string& ckpt_path,
                   const std::string& data_dir, int city, const std::string& source,
                   const std::string& split, std::string out_dir) {
    Checkpoint ckpt = Checkpoint::load(ckpt_path);
    if (out_dir.empty()) out_dir = default_out_dir(ckpt.config.seed);
    RunManifest manifest(args, ckpt.config.seed, ckpt.config.to_json(), out_dir);
    auto data = load_and_prepare(data_dir, ckpt.config, /*adopt_categories=*/false);
    if (city < 0 || city >= static_cast<int>(data.size()))
        throw std::runtime_error("gate-stats: city " + std::to_string(city) + " not in dataset");
    const CityDataset& ds = data[city];
    std::vector<Trajectory> trajs;
    if (split == "train" || split == "all")
        trajs.insert(trajs.end(), ds.train.begin(), ds.train.end());
    if (split == "val" || split == "all") trajs.insert(trajs.end(), ds.val.begin(), ds.val.end());
    if (split == "test" || split == "all")
        trajs.insert(trajs.end(), ds.test.begin(), ds.test.end());
    Model model = ckpt.instantiate();
    GateStats stats =
        gate_stats(model, ds.city, trajs, ckpt.config, gate_source_from_string(source));
    write_gate_stats_csv(stats, out_dir + "/gate_tod_shares.csv",
                         out_dir + "/gate_layer_weights.csv");
    manifest.add_artifact("gate_tod_shares", out_dir + "/gate_tod_shares.csv");
    manifest.add_artifact("gate_layer_weights", out_dir + "/gate_layer_weights.csv");
    manifest.complete();
    std::cout << stats.total_records << " gate records over " << trajs.size()
              << " trajectories\n";
    return 0;
}

int cmd_experiment(const std::vector<std::string>& args, ExperimentOptions opt,
                   const std::string& kind) {
    opt.kind = experiment_kind_from_string(kind);
    if (opt.out_dir.empty()) opt.out_dir = default_out_dir(opt.base.seed);
    RunManifest manifest(args, opt.base.seed, opt.base.to_json(), opt.out_dir);
    auto results = run_experiment(opt);
    manifest.add_artifact("summary", opt.out_dir + "/summary.csv");
    manifest.complete();
    for (const CellResult& r : results)
        std::cout << r.cell << " city " << r.report.city_id << ": acc@1 " << r.report.acc1
                  << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Cross-city next-location prediction with a spatially-aware "
                 "mixture-of-experts transformer"};
    app.require_subcommand(1);

    // gen-data
    GeneratorConfig gen;
    std::string gen_out;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic multi-city dataset");
    gen_cmd->add_option("--seed", gen.seed, "generator seed");
    gen_cmd->add_option("--cities", gen.cities, "number of cities");
    gen_cmd->add_option("--locations", gen.locations, "locations per city");
    gen_cmd->add_option("--categories", gen.poi_categories, "POI categories");
    gen_cmd->add_option("--users", gen.users, "users per city");
    gen_cmd->add_option("--days", gen.days, "days of movement per user");
    gen_cmd->add_option("--anchors", gen.anchors, "anchor-group size per user");
    gen_cmd->add_option("--noise", gen.noise, "excursion probability in [0,1]");
    gen_cmd->add_flag("--time-agnostic", gen.time_agnostic,
                      "use the same successor in both day halves");
    gen_cmd->add_option("--out", gen_out, "output directory");

    // pretrain
    TrainFlags pre_flags;
    std::string pre_data, pre_out;
    std::vector<int> pre_cities;
    auto* pre_cmd = app.add_subcommand("pretrain", "cross-city pretraining");
    pre_cmd->add_option("--data", pre_data, "dataset directory")->required();
    pre_cmd->add_option("--out", pre_out, "output directory");
    pre_cmd->add_option("--cities", pre_cities, "city indices to pretrain on (default: all)");
    pre_flags.add_options(pre_cmd);

    // finetune
    TrainFlags fin_flags;
    std::string fin_ckpt, fin_data, fin_out;
    int fin_city = 0;
    double fin_fraction = 1.0;
    int fin_epochs = 1;
    auto* fin_cmd = app.add_subcommand("finetune", "fine-tune a checkpoint on one city");
    fin_cmd->add_option("--checkpoint", fin_ckpt, "checkpoint file")->required();
    fin_cmd->add_option("--data", fin_data, "dataset directory")->required();
    fin_cmd->add_option("--city", fin_city, "target city index")->required();
    fin_cmd->add_option("--fraction", fin_fraction, "fraction of the training split to use");
    fin_cmd->add_option("--epochs", fin_epochs, "fine-tuning epochs");
    fin_cmd->add_option("--out", fin_out, "output directory");

    // eval
    std::string ev_ckpt, ev_data, ev_out;
    int ev_city = 0;
    int ev_k = 0;
    auto* ev_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one city's test split");
    ev_cmd->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev_cmd->add_option("--data", ev_data, "dataset directory")->required();
    ev_cmd->add_option("--city", ev_city, "city index")->required();
    ev_cmd->add_option("--k", ev_k, "additionally report Acc@k for this k");
    ev_cmd->add_option("--out", ev_out, "output directory");

    // ablate
    TrainFlags ab_flags;
    std::string ab_data, ab_out, ab_variant = "all";
    int ab_city = 0;
    auto* ab_cmd = app.add_subcommand("ablate", "train and evaluate ablation variants");
    ab_cmd->add_option("--data", ab_data, "dataset directory")->required();
    ab_cmd->add_option("--city", ab_city, "city index")->required();
    ab_cmd->add_option("--out", ab_out, "output directory");
    ab_flags.add_options(ab_cmd);
    ab_cmd->get_option("--variant")->description("variant name or 'all'");
    ab_flags.variant = "all";

    // gate-stats
    std::string gs_ckpt, gs_data, gs_out, gs_source = "final", gs_split = "test";
    int gs_city = 0;
    auto* gs_cmd = app.add_subcommand("gate-stats", "export router statistics");
    gs_cmd->add_option("--checkpoint", gs_ckpt, "checkpoint file")->required();
    gs_cmd->add_option("--data", gs_data, "dataset directory")->required();
    gs_cmd->add_option("--city", gs_city, "city index")->required();
    gs_cmd->add_option("--gate-source", gs_source, "top-1 source: final|time|traj")
        ->check(CLI::IsMember({"final", "time", "traj"}));
    gs_cmd->add_option("--split", gs_split, "trajectory split: test|train|val|all")
        ->check(CLI::IsMember({"test", "train", "val", "all"}));
    gs_cmd->add_option("--out", gs_out, "output directory");

    // experiment
    TrainFlags ex_flags;
    ExperimentOptions ex_opt;
    std::string ex_kind;
    auto* ex_cmd = app.add_subcommand("experiment", "run a pretrain/finetune/eval grid");
    ex_cmd->add_option("--kind", ex_kind, "overall|scaling|fewshot|ablation")->required();
    ex_cmd->add_option("--data", ex_opt.data_dir, "dataset directory")->required();
    ex_cmd->add_option("--out", ex_opt.out_dir, "output directory");
    ex_cmd->add_option("--seeds", ex_opt.seeds, "seeds, one grid replica each");
    ex_cmd->add_option("--target", ex_opt.target_city, "target city (default: last)");
    ex_cmd->add_option("--volumes", ex_opt.volumes, "pretrain volume grid");
    ex_cmd->add_option("--fractions", ex_opt.fractions, "fine-tune fraction grid");
    ex_cmd->add_option("--finetune-epochs", ex_opt.finetune_epochs, "fine-tune epochs per cell");
    ex_cmd->add_option("--jobs", ex_opt.jobs, "parallel grid cells");
    ex_flags.add_options(ex_cmd);

    std::vector<const char*> argv;
    argv.push_back("trajmoe");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_data(args, gen, gen_out);
        if (pre_cmd->parsed())
            return cmd_pretrain(args, pre_flags.resolve(pre_cmd), pre_data, pre_cities, pre_out);
        if (fin_cmd->parsed())
            return cmd_finetune(args, fin_ckpt, fin_data, fin_city, fin_fraction, fin_epochs,
                                fin_out);
        if (ev_cmd->parsed()) return cmd_eval(args, ev_ckpt, ev_data, ev_city, ev_k, ev_out);
        if (ab_cmd->parsed())
            return cmd_ablate(args, ab_flags.resolve(ab_cmd, /*variant_is_sweep=*/true), ab_data,
                              ab_city, ab_flags.variant, ab_out);
        if (gs_cmd->parsed())
            return cmd_gate_stats(args, gs_ckpt, gs_data, gs_city, gs_source, gs_split, gs_out);
        if (ex_cmd->parsed()) {
            ex_opt.base = ex_flags.resolve(ex_cmd);
            return cmd_experiment(args, ex_opt, ex_kind);
        }
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace trajmoe
