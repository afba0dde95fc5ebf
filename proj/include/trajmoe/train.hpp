#pragma once

#include <string>
#include <vector>

#include "trajmoe/adamw.hpp"
#include "trajmoe/model.hpp"

namespace trajmoe {

struct TrainConfig {
    ModelConfig model;
    double lr = 3e-4;
    double weight_decay = 0.01;
    int batch_size = 16;
    int max_epochs = 50;
    int patience = 3;
    std::uint64_t seed = 7;
    bool city_sampling_proportional = false;  // default: uniform over cities per step
    bool loss_all_positions = true;           // false: only the last valid position per trajectory
    double val_fraction = 0.10;
    double test_fraction = 0.10;

    void validate() const;
    AdamWConfig optimizer() const { return AdamWConfig{lr, 0.9, 0.999, 1e-8, weight_decay}; }

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// One city's preprocessed trajectories, split once and reused everywhere.
struct CityDataset {
    City city;
    std::vector<Trajectory> train;
    std::vector<Trajectory> val;
    std::vector<Trajectory> test;
};

// Seeded shuffle, then test/val/train in that order. The split depends only
// on (seed, city id, fractions), never on call order.
CityDataset split_dataset(City city, std::vector<Trajectory> trajs, double val_fraction,
                          double test_fraction, std::uint64_t seed);

struct TrainRecord {
    std::string phase;  // "pretrain" or "finetune"
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = -1.0;  // -1 when no validation was run
};

// Immutable snapshot of a trained model plus how it got there. Round-trips
// bit-exactly through save/load.
struct Checkpoint {
    int format_version = 1;
    TrainConfig config;
    int epochs_run = 0;
    std::vector<TrainRecord> history;
    std::vector<std::pair<std::string, Matrix>> values;

    static Checkpoint from_model(const Model& model, const TrainConfig& cfg);
    Model instantiate() const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// Target mask for the loss, honoring the loss-position mode.
std::vector<std::uint8_t> effective_valid(const PaddedBatch& batch, bool all_positions);

// Forward + masked cross entropy for one batch.
Var batch_loss(Model& model, Tape& tape, const PaddedBatch& batch, const City& city,
               bool all_positions);

// Mean validation loss across cities (cities with an empty validation set
// are skipped; returns -1 if none has one).
double mean_val_loss(Model& model, const std::vector<CityDataset>& data, const TrainConfig& cfg);

// Cross-city pretraining: per step, sample a city, sample a mini-batch from
// its training split, and take one AdamW step. Early-stops on the mean
// validation loss with the configured patience and returns the
// best-validation snapshot.
Checkpoint pretrain(const std::vector<CityDataset>& data, const TrainConfig& cfg);

// Seeded subsample of the target city's training split (without
// replacement), then plain epoch training. The optimizer starts fresh;
// moment state is not part of a checkpoint.
Checkpoint finetune(const Checkpoint& start, const CityDataset& target, double fraction,
                    int epochs);

// Number of trajectories a fraction selects; errors if zero.
int subsample_count(std::size_t available, double fraction);

}  // namespace trajmoe
