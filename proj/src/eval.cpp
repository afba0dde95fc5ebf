#include "trajmoe/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>

#include "trajmoe/rng.hpp"

namespace trajmoe {

std::vector<int> rank_candidates(const Eigen::Ref<const Eigen::RowVectorXd>& scores, int k) {
    const int n = static_cast<int>(scores.size());
    if (k < 1) throw std::invalid_argument("rank_candidates: k must be >= 1");
    if (k > n)
        throw std::invalid_argument("rank_candidates: k=" + std::to_string(k) + " exceeds " +
                                    std::to_string(n) + " candidates");
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
        if (scores(a) != scores(b)) return scores(a) > scores(b);
        return a < b;
    });
    ids.resize(k);
    return ids;
}

double acc_at_k(const std::vector<std::vector<int>>& ranked, const std::vector<int>& truths,
                int k) {
    if (ranked.empty()) throw std::invalid_argument("acc_at_k: empty sample set");
    if (ranked.size() != truths.size())
        throw std::invalid_argument("acc_at_k: " + std::to_string(ranked.size()) +
                                    " predictions vs " + std::to_string(truths.size()) +
                                    " truths");
    if (k < 1) throw std::invalid_argument("acc_at_k: k must be >= 1");
    long hits = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (static_cast<int>(ranked[i].size()) < k)
            throw std::invalid_argument("acc_at_k: prediction list shorter than k");
        for (int j = 0; j < k; ++j)
            if (ranked[i][j] == truths[i]) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

std::string config_fingerprint(const TrainConfig& cfg) {
    const std::string s = cfg.to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

EvalReport evaluate(Model& model, const City& city, const std::vector<Trajectory>& split,
                    const TrainConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    EvalReport rep;
    rep.city_id = city.city_id;
    rep.config_fingerprint = config_fingerprint(cfg);
    if (split.empty()) throw std::invalid_argument("evaluate: empty trajectory set");
    const int top = 5;
    long hits[3] = {0, 0, 0};
    const int ks[3] = {1, 3, 5};
    for (std::size_t i = 0; i < split.size(); i += cfg.batch_size) {
        const std::size_t end = std::min(split.size(), i + cfg.batch_size);
        std::vector<Trajectory> chunk(split.begin() + i, split.begin() + end);
        PaddedBatch batch = pad_batch(chunk, city, cfg.model.seq_len);
        Tape tape;
        auto fwd = model.forward(tape, batch, city);
        const Matrix& logits = fwd.logits.value();
        const int k_eff = std::min<int>(top, city.size());
        for (Index r = 0; r < logits.rows(); ++r) {
            if (!batch.valid_target[r]) continue;
            const auto ranked = rank_candidates(logits.row(r), k_eff);
            ++rep.samples;
            for (int ki = 0; ki < 3; ++ki) {
                const int k = std::min(ks[ki], k_eff);
                for (int j = 0; j < k; ++j)
                    if (ranked[j] == batch.targets[r]) {
                        ++hits[ki];
                        break;
                    }
            }
        }
    }
    if (rep.samples == 0) throw std::invalid_argument("evaluate: no valid prediction positions");
    rep.acc1 = static_cast<double>(hits[0]) / rep.samples;
    rep.acc3 = static_cast<double>(hits[1]) / rep.samples;
    rep.acc5 = static_cast<double>(hits[2]) / rep.samples;
    rep.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

double evaluate_acc_at_k(Model& model, const City& city, const std::vector<Trajectory>& split,
                         const TrainConfig& cfg, int k) {
    if (k < 1) throw std::invalid_argument("evaluate_acc_at_k: k must be >= 1");
    const int k_eff = std::min(k, city.size());
    std::vector<std::vector<int>> ranked;
    std::vector<int> truths;
    for (std::size_t i = 0; i < split.size(); i += cfg.batch_size) {
        const std::size_t end = std::min(split.size(), i + cfg.batch_size);
        std::vector<Trajectory> chunk(split.begin() + i, split.begin() + end);
        PaddedBatch batch = pad_batch(chunk, city, cfg.model.seq_len);
        Tape tape;
        auto fwd = model.forward(tape, batch, city);
        const Matrix& logits = fwd.logits.value();
        for (Index r = 0; r < logits.rows(); ++r) {
            if (!batch.valid_target[r]) continue;
            ranked.push_back(rank_candidates(logits.row(r), k_eff));
            truths.push_back(batch.targets[r]);
        }
    }
    return acc_at_k(ranked, truths, k_eff);
}

MarkovBaseline::MarkovBaseline(const std::vector<Trajectory>& train, int n_locations)
    : n_(n_locations),
      counts_(n_locations, std::vector<long>(n_locations, 0)),
      row_totals_(n_locations, 0),
      visits_(n_locations, 0) {
    if (train.empty()) throw std::invalid_argument("markov: empty training set");
    for (const Trajectory& tr : train) {
        for (int i = 0; i < tr.length(); ++i) {
            const int cur = tr.steps[i].location;
            if (cur < 0 || cur >= n_)
                throw std::out_of_range("markov: location " + std::to_string(cur) +
                                        " outside vocabulary");
            ++visits_[cur];
            if (i + 1 < tr.length()) {
                const int nxt = tr.steps[i + 1].location;
                ++counts_[cur][nxt];
                ++row_totals_[cur];
            }
        }
    }
    global_rank_.resize(n_);
    std::iota(global_rank_.begin(), global_rank_.end(), 0);
    std::sort(global_rank_.begin(), global_rank_.end(), [&](int a, int b) {
        if (visits_[a] != visits_[b]) return visits_[a] > visits_[b];
        return a < b;
    });
}

std::vector<int> MarkovBaseline::topk(int current, int k) const {
    if (k < 1 || k > n_) throw std::invalid_argument("markov: k outside [1, vocabulary]");
    if (current < 0 || current >= n_ || row_totals_[current] == 0)
        return std::vector<int>(global_rank_.begin(), global_rank_.begin() + k);
    // Add-one smoothing shifts every count equally, so the ranking is the
    // count ranking with the id tie-break.
    std::vector<int> ids(n_);
    std::iota(ids.begin(), ids.end(), 0);
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
        if (counts_[current][a] != counts_[current][b])
            return counts_[current][a] > counts_[current][b];
        return a < b;
    });
    ids.resize(k);
    return ids;
}

double markov_acc_at_k(const std::vector<Trajectory>& train, const std::vector<Trajectory>& test,
                       int n_locations, int k) {
    MarkovBaseline model(train, n_locations);
    std::vector<std::vector<int>> ranked;
    std::vector<int> truths;
    for (const Trajectory& tr : test) {
        for (int i = 0; i + 1 < tr.length(); ++i) {
            ranked.push_back(model.topk(tr.steps[i].location, k));
            truths.push_back(tr.steps[i + 1].location);
        }
    }
    return acc_at_k(ranked, truths, k);
}

ModelConfig apply_ablation(ModelConfig cfg, AblationVariant variant) {
    cfg.ablation = variant;
    AblationFlags::from_variant(variant);  // validates
    return cfg;
}

GateSource gate_source_from_string(const std::string& s) {
    if (s == "final") return GateSource::FinalW;
    if (s == "time") return GateSource::TimeGate;
    if (s == "traj") return GateSource::TrajGate;
    throw std::invalid_argument("unknown gate source: " + s + " (expected final|time|traj)");
}

namespace {

double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) return 0.0;
    const double h = p * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + (h - lo) * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

GateStats gate_stats(Model& model, const City& city, const std::vector<Trajectory>& split,
                     const TrainConfig& cfg, GateSource source) {
    GateStats stats;
    long slot_stream[kTodSlots][kNumSpecialized] = {};
    std::vector<std::vector<std::vector<double>>> weights(
        cfg.model.layers, std::vector<std::vector<double>>(kNumSpecialized));

    for (std::size_t i = 0; i < split.size(); i += cfg.batch_size) {
        const std::size_t end = std::min(split.size(), i + cfg.batch_size);
        std::vector<Trajectory> chunk(split.begin() + i, split.begin() + end);
        PaddedBatch batch = pad_batch(chunk, city, cfg.model.seq_len);
        Tape tape;
        auto fwd = model.forward(tape, batch, city, /*collect_trace=*/true);
        for (const GateRecord& rec : fwd.trace.records) {
            const auto& src = source == GateSource::FinalW    ? rec.decision.weights
                              : source == GateSource::TimeGate ? rec.decision.w_time
                                                               : rec.decision.w_traj;
            int arg = 0;
            for (int s = 1; s < kNumSpecialized; ++s)
                if (src[s] > src[arg]) arg = s;
            ++slot_stream[rec.tod][arg];
            for (int s = 0; s < kNumSpecialized; ++s)
                weights[rec.layer][s].push_back(rec.decision.w_traj[s]);
            ++stats.total_records;
        }
    }

    for (int slot = 0; slot < kTodSlots; ++slot) {
        long total = 0;
        for (int s = 0; s < kNumSpecialized; ++s) total += slot_stream[slot][s];
        if (total == 0) continue;
        GateStats::SlotRow row;
        row.slot = slot;
        row.count = total;
        for (int s = 0; s < kNumSpecialized; ++s)
            row.share[s] = static_cast<double>(slot_stream[slot][s]) / total;
        stats.slots.push_back(row);
    }
    for (int l = 0; l < cfg.model.layers; ++l) {
        for (int s = 0; s < kNumSpecialized; ++s) {
            GateStats::LayerRow row;
            row.layer = l;
            row.stream = s;
            auto& vals = weights[l][s];
            row.count = static_cast<long>(vals.size());
            if (!vals.empty()) {
                row.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
                std::sort(vals.begin(), vals.end());
                row.q25 = quantile_sorted(vals, 0.25);
                row.median = quantile_sorted(vals, 0.50);
                row.q75 = quantile_sorted(vals, 0.75);
            }
            stats.layers.push_back(row);
        }
    }
    return stats;
}

namespace {

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void open_for_write(std::ofstream& out, const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    out.open(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
}

}  // namespace

void write_reports_csv(const std::vector<EvalReport>& reports, const std::string& path) {
    std::ofstream out;
    open_for_write(out, path);
    out << "city,samples,acc_at_1,acc_at_3,acc_at_5,config_fingerprint\n";
    for (const EvalReport& r : reports)
        out << r.city_id << ',' << r.samples << ',' << fmt_real(r.acc1) << ',' << fmt_real(r.acc3)
            << ',' << fmt_real(r.acc5) << ',' << r.config_fingerprint << "\n";
    if (!out) throw std::runtime_error("write to " + path + " failed");
}

void write_gate_stats_csv(const GateStats& stats, const std::string& slot_path,
                          const std::string& layer_path) {
    std::ofstream slots;
    open_for_write(slots, slot_path);
    slots << "slot,count,share_poi,share_pos,share_pop\n";
    for (const auto& r : stats.slots)
        slots << r.slot << ',' << r.count << ',' << fmt_real(r.share[0]) << ','
              << fmt_real(r.share[1]) << ',' << fmt_real(r.share[2]) << "\n";
    std::ofstream layers;
    open_for_write(layers, layer_path);
    static const char* stream_names[kNumSpecialized] = {"poi", "pos", "pop"};
    layers << "layer,stream,count,mean,q25,median,q75\n";
    for (const auto& r : stats.layers)
        layers << r.layer << ',' << stream_names[r.stream] << ',' << r.count << ','
               << fmt_real(r.mean) << ',' << fmt_real(r.q25) << ',' << fmt_real(r.median) << ','
               << fmt_real(r.q75) << "\n";
}

int dataset_poi_categories(const Dataset& ds) {
    if (ds.cities.empty()) throw std::invalid_argument("dataset has no cities");
    const int c = ds.cities.front().poi_categories;
    for (const City& city : ds.cities)
        if (city.poi_categories != c)
            throw std::invalid_argument("dataset mixes POI category counts (" +
                                        std::to_string(c) + " vs " +
                                        std::to_string(city.poi_categories) + ")");
    return c;
}

std::vector<CityDataset> prepare_city_datasets(const Dataset& ds, const TrainConfig& cfg,
                                               std::uint64_t seed) {
    if (cfg.model.poi_categories != dataset_poi_categories(ds))
        throw std::invalid_argument(
            "model expects " + std::to_string(cfg.model.poi_categories) +
            " POI categories but the dataset has " +
            std::to_string(dataset_poi_categories(ds)));
    std::vector<CityDataset> out;
    for (std::size_t c = 0; c < ds.cities.size(); ++c) {
        auto windows = preprocess(ds.trajectories[c], 3, 5, cfg.model.seq_len);
        out.push_back(split_dataset(ds.cities[c], std::move(windows), cfg.val_fraction,
                                    cfg.test_fraction, seed));
    }
    return out;
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
    if (s == "overall") return ExperimentKind::Overall;
    if (s == "scaling") return ExperimentKind::Scaling;
    if (s == "fewshot") return ExperimentKind::Fewshot;
    if (s == "ablation") return ExperimentKind::Ablation;
    throw std::invalid_argument("unknown experiment kind: " + s);
}

namespace {

struct Cell {
    std::string name;
    std::uint64_t seed;
    std::function<std::vector<EvalReport>()> run;
};

// Seeded per-city subsample of the training split, used by the scaling grid.
std::vector<CityDataset> subsample_train(std::vector<CityDataset> data, double volume,
                                         std::uint64_t seed) {
    for (auto& ds : data) {
        const int count = subsample_count(ds.train.size(), volume);
        std::vector<int> order(ds.train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(seed, "scale-volume", static_cast<std::uint64_t>(ds.city.city_id)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        std::vector<Trajectory> keep;
        for (int i = 0; i < count; ++i) keep.push_back(ds.train[order[i]]);
        ds.train = std::move(keep);
    }
    return data;
}

}  // namespace

std::vector<CellResult> run_experiment(const ExperimentOptions& opt) {
    Dataset ds = load_dataset(opt.data_dir);
    const int n_cities = static_cast<int>(ds.cities.size());
    ExperimentOptions resolved = opt;
    resolved.base.model.poi_categories = dataset_poi_categories(ds);
    const int target = opt.target_city < 0 ? n_cities - 1 : opt.target_city;
    if (target < 0 || target >= n_cities)
        throw std::invalid_argument("experiment: target city " + std::to_string(target) +
                                    " not in dataset of " + std::to_string(n_cities) + " cities");
    if ((opt.kind == ExperimentKind::Scaling || opt.kind == ExperimentKind::Fewshot) &&
        n_cities < 2)
        throw std::invalid_argument("experiment: transfer grids need at least two cities");
    if (opt.seeds.empty()) throw std::invalid_argument("experiment: no seeds");
    if (opt.kind == ExperimentKind::Scaling && opt.volumes.empty())
        throw std::invalid_argument("experiment: empty volume grid");
    if (opt.kind == ExperimentKind::Fewshot && opt.fractions.empty())
        throw std::invalid_argument("experiment: empty fraction grid");

    std::vector<Cell> cells;
    for (std::uint64_t seed : opt.seeds) {
        TrainConfig cfg = resolved.base;
        cfg.seed = seed;
        const std::string tag = "seed" + std::to_string(seed);
        switch (opt.kind) {
            case ExperimentKind::Overall: {
                cells.push_back({"overall-" + tag, seed, [&, cfg]() {
                    auto data = prepare_city_datasets(ds, cfg, cfg.seed);
                    Checkpoint ckpt = pretrain(data, cfg);
                    Model model = ckpt.instantiate();
                    std::vector<EvalReport> reps;
                    for (const auto& d : data)
                        reps.push_back(evaluate(model, d.city, d.test, cfg));
                    return reps;
                }});
                break;
            }
            case ExperimentKind::Scaling: {
                for (double volume : opt.volumes) {
                    const std::string name =
                        "scaling-" + tag + "-vol" + std::to_string(static_cast<int>(volume * 100));
                    cells.push_back({name, seed, [&, cfg, volume]() {
                        auto data = prepare_city_datasets(ds, cfg, cfg.seed);
                        CityDataset target_ds = data[target];
                        data.erase(data.begin() + target);
                        data = subsample_train(std::move(data), volume, cfg.seed);
                        Checkpoint ckpt = pretrain(data, cfg);
                        Checkpoint tuned = finetune(ckpt, target_ds, 1.0, opt.finetune_epochs);
                        Model model = tuned.instantiate();
                        return std::vector<EvalReport>{
                            evaluate(model, target_ds.city, target_ds.test, cfg)};
                    }});
                }
                break;
            }
            case ExperimentKind::Fewshot: {
                for (double fraction : opt.fractions) {
                    const std::string name = "fewshot-" + tag + "-pct" +
                                             std::to_string(static_cast<int>(fraction * 100));
                    cells.push_back({name, seed, [&, cfg, fraction]() {
                        auto data = prepare_city_datasets(ds, cfg, cfg.seed);
                        CityDataset target_ds = data[target];
                        data.erase(data.begin() + target);
                        Checkpoint ckpt = pretrain(data, cfg);
                        Checkpoint tuned = finetune(ckpt, target_ds, fraction,
                                                    opt.finetune_epochs);
                        Model model = tuned.instantiate();
                        return std::vector<EvalReport>{
                            evaluate(model, target_ds.city, target_ds.test, cfg)};
                    }});
                }
                break;
            }
            case ExperimentKind::Ablation: {
                for (AblationVariant v :
                     {AblationVariant::Full, AblationVariant::RemoveAdaptedGate,
                      AblationVariant::RemoveTimeGate, AblationVariant::RemoveTrajGate,
                      AblationVariant::RemoveMoeKeepFused, AblationVariant::RemoveFusedExpert}) {
                    const std::string name = std::string("ablation-") + tag + "-" + to_string(v);
                    cells.push_back({name, seed, [&, cfg, v]() {
                        TrainConfig acfg = cfg;
                        acfg.model = apply_ablation(acfg.model, v);
                        auto data = prepare_city_datasets(ds, acfg, acfg.seed);
                        std::vector<CityDataset> single{data[target]};
                        Checkpoint ckpt = pretrain(single, acfg);
                        Model model = ckpt.instantiate();
                        return std::vector<EvalReport>{
                            evaluate(model, single[0].city, single[0].test, acfg)};
                    }});
                }
                break;
            }
        }
    }

    std::vector<CellResult> results;
    std::vector<std::vector<EvalReport>> cell_reports(cells.size());
    const int jobs = std::max(1, opt.jobs);
    if (jobs == 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) cell_reports[i] = cells[i].run();
    } else {
        std::size_t next = 0;
        while (next < cells.size()) {
            std::vector<std::pair<std::size_t, std::future<std::vector<EvalReport>>>> wave;
            for (int j = 0; j < jobs && next < cells.size(); ++j, ++next)
                wave.emplace_back(next, std::async(std::launch::async, cells[next].run));
            for (auto& [idx, fut] : wave) cell_reports[idx] = fut.get();
        }
    }

    nlohmann::json summary;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!opt.out_dir.empty())
            write_reports_csv(cell_reports[i], opt.out_dir + "/" + cells[i].name + "/report.csv");
        for (const EvalReport& rep : cell_reports[i]) {
            results.push_back(CellResult{cells[i].name, cells[i].seed, rep});
            summary[cells[i].name].push_back({{"city", rep.city_id},
                                              {"samples", rep.samples},
                                              {"acc_at_1", rep.acc1},
                                              {"acc_at_3", rep.acc3},
                                              {"acc_at_5", rep.acc5}});
        }
    }
    if (!opt.out_dir.empty()) {
        std::ofstream out;
        open_for_write(out, opt.out_dir + "/summary.json");
        out << summary.dump(2) << "\n";
        std::vector<EvalReport> flat;
        for (const auto& r : results) flat.push_back(r.report);
        write_reports_csv(flat, opt.out_dir + "/summary.csv");
    }
    return results;
}

}  // namespace trajmoe
