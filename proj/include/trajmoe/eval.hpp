#pragma once

#include <map>
#include <string>
#include <vector>

#include "trajmoe/synth.hpp"
#include "trajmoe/train.hpp"

namespace trajmoe {

struct EvalReport {
    int city_id = 0;
    long samples = 0;
    double acc1 = 0.0;
    double acc3 = 0.0;
    double acc5 = 0.0;
    std::string config_fingerprint;
    double wall_clock_sec = 0.0;  // console-only; never serialized into report files
};

// Candidate ids ordered by descending score, ties by ascending id.
std::vector<int> rank_candidates(const Eigen::Ref<const Eigen::RowVectorXd>& scores, int k);

// Fraction of samples whose truth appears among the first k ranked ids.
double acc_at_k(const std::vector<std::vector<int>>& ranked, const std::vector<int>& truths,
                int k);

// FNV-1a over the canonical config dump, as a hex string.
std::string config_fingerprint(const TrainConfig& cfg);

// Acc@{1,3,5} of a model over one split (every valid next-location position
// counts as a sample). Pure: repeated calls give identical reports.
EvalReport evaluate(Model& model, const City& city, const std::vector<Trajectory>& split,
                    const TrainConfig& cfg);

// Acc@k for an arbitrary k (capped at the candidate count).
double evaluate_acc_at_k(Model& model, const City& city, const std::vector<Trajectory>& split,
                         const TrainConfig& cfg, int k);

// First-order transition baseline with add-one smoothing; an unseen current
// location falls back to the global visit-frequency ranking.
class MarkovBaseline {
  public:
    MarkovBaseline(const std::vector<Trajectory>& train, int n_locations);

    std::vector<int> topk(int current, int k) const;

  private:
    int n_;
    std::vector<std::vector<long>> counts_;
    std::vector<long> row_totals_;
    std::vector<long> visits_;
    std::vector<int> global_rank_;
};

double markov_acc_at_k(const std::vector<Trajectory>& train, const std::vector<Trajectory>& test,
                       int n_locations, int k);

// Swaps the ablation variant into a config (validation included).
ModelConfig apply_ablation(ModelConfig cfg, AblationVariant variant);

enum class GateSource { FinalW, TimeGate, TrajGate };

GateSource gate_source_from_string(const std::string& s);

struct GateStats {
    struct SlotRow {
        int slot = 0;
        long count = 0;
        double share[kNumSpecialized] = {0, 0, 0};  // poi, pos, pop
    };
    struct LayerRow {
        int layer = 0;
        int stream = 0;  // 0 poi, 1 pos, 2 pop
        long count = 0;
        double mean = 0, q25 = 0, median = 0, q75 = 0;
    };
    std::vector<SlotRow> slots;    // only slots with count > 0
    std::vector<LayerRow> layers;  // layers x 3 streams
    long total_records = 0;
};

// Aggregates a model's gate trace over a trajectory set: per-tod-slot top-1
// shares of `source`, and per-layer summaries of the traj-gate weights.
GateStats gate_stats(Model& model, const City& city, const std::vector<Trajectory>& split,
                     const TrainConfig& cfg, GateSource source = GateSource::FinalW);

void write_reports_csv(const std::vector<EvalReport>& reports, const std::string& path);
void write_gate_stats_csv(const GateStats& stats, const std::string& slot_path,
                          const std::string& layer_path);

// POI category count shared by all cities of a dataset (errors if mixed).
int dataset_poi_categories(const Dataset& ds);

// Windows every city's raw streams to the model's sequence length and
// splits them train/val/test with the given seed. The model's POI category
// count must match the dataset's.
std::vector<CityDataset> prepare_city_datasets(const Dataset& ds, const TrainConfig& cfg,
                                               std::uint64_t seed);

enum class ExperimentKind { Overall, Scaling, Fewshot, Ablation };

ExperimentKind experiment_kind_from_string(const std::string& s);

struct ExperimentOptions {
    ExperimentKind kind = ExperimentKind::Overall;
    std::string data_dir;
    std::string out_dir;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    TrainConfig base;
    int target_city = -1;  // -1: last city in the dataset
    std::vector<double> volumes = {0.25, 0.5, 1.0};
    std::vector<double> fractions = {0.01, 0.05, 0.10, 1.0};
    int finetune_epochs = 1;
    int jobs = 1;
};

struct CellResult {
    std::string cell;
    std::uint64_t seed = 0;
    EvalReport report;
};

// Pretrain/finetune/eval grids. Every grid cell is validated before any
// training starts; results land under out_dir/<cell>/report.csv plus a
// summary keyed by cell.
std::vector<CellResult> run_experiment(const ExperimentOptions& opt);

}  // namespace trajmoe
