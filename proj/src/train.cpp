#include "trajmoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "trajmoe/rng.hpp"

namespace trajmoe {

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (patience < 1) throw std::invalid_argument("train config: patience must be >= 1");
    if (max_epochs < 0) throw std::invalid_argument("train config: max epochs must be >= 0");
    if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0)
        throw std::invalid_argument("train config: invalid split fractions");
}

nlohmann::json TrainConfig::to_json() const {
    return nlohmann::json{{"model", model.to_json()},
                          {"lr", lr},
                          {"weight_decay", weight_decay},
                          {"batch_size", batch_size},
                          {"max_epochs", max_epochs},
                          {"patience", patience},
                          {"seed", seed},
                          {"city_sampling_proportional", city_sampling_proportional},
                          {"loss_all_positions", loss_all_positions},
                          {"val_fraction", val_fraction},
                          {"test_fraction", test_fraction}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.model = ModelConfig::from_json(j.at("model"));
    c.lr = j.at("lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.max_epochs = j.at("max_epochs").get<int>();
    c.patience = j.at("patience").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.city_sampling_proportional = j.at("city_sampling_proportional").get<bool>();
    c.loss_all_positions = j.at("loss_all_positions").get<bool>();
    c.val_fraction = j.at("val_fraction").get<double>();
    c.test_fraction = j.at("test_fraction").get<double>();
    return c;
}

namespace {

void seeded_shuffle(std::vector<int>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

CityDataset split_dataset(City city, std::vector<Trajectory> trajs, double val_fraction,
                          double test_fraction, std::uint64_t seed) {
    CityDataset out;
    const int n = static_cast<int>(trajs.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(city.city_id)));
    seeded_shuffle(order, rng);
    const int n_test = static_cast<int>(n * test_fraction);
    const int n_val = static_cast<int>(n * val_fraction);
    for (int i = 0; i < n; ++i) {
        const Trajectory& t = trajs[order[i]];
        if (i < n_test)
            out.test.push_back(t);
        else if (i < n_test + n_val)
            out.val.push_back(t);
        else
            out.train.push_back(t);
    }
    out.city = std::move(city);
    return out;
}

Checkpoint Checkpoint::from_model(const Model& model, const TrainConfig& cfg) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    for (const auto& p : model.params()) ckpt.values.emplace_back(p->name, p->value);
    return ckpt;
}

Model Checkpoint::instantiate() const {
    Model model(config.model);
    std::size_t found = 0;
    for (const auto& [name, value] : values) {
        if (!model.params().contains(name))
            throw std::runtime_error("checkpoint: unexpected parameter " + name);
        Param& p = model.params().at(name);
        check_same_shape(p.value, value, ("checkpoint parameter " + name).c_str());
        p.value = value;
        ++found;
    }
    if (found != model.params().count())
        throw std::runtime_error("checkpoint: expected " + std::to_string(model.params().count()) +
                                 " parameters, found " + std::to_string(found));
    return model;
}

void Checkpoint::save(const std::string& path) const {
    nlohmann::json j;
    j["format_version"] = format_version;
    j["config"] = config.to_json();
    j["meta"]["epochs_run"] = epochs_run;
    auto& hist = j["meta"]["history"] = nlohmann::json::array();
    for (const auto& r : history)
        hist.push_back({{"phase", r.phase},
                        {"epoch", r.epoch},
                        {"train_loss", r.train_loss},
                        {"val_loss", r.val_loss}});
    auto& params = j["params"] = nlohmann::json::array();
    for (const auto& [name, value] : values) {
        nlohmann::json p;
        p["name"] = name;
        p["rows"] = value.rows();
        p["cols"] = value.cols();
        auto& data = p["data"] = nlohmann::json::array();
        for (Index i = 0; i < value.size(); ++i) data.push_back(value.data()[i]);
        params.push_back(std::move(p));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out << j.dump();
    if (!out) throw std::runtime_error("checkpoint: write to " + path + " failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: parse error in " + path + ": " + e.what());
    }
    Checkpoint ckpt;
    ckpt.format_version = j.at("format_version").get<int>();
    if (ckpt.format_version != 1)
        throw std::runtime_error("checkpoint: unsupported format version " +
                                 std::to_string(ckpt.format_version));
    ckpt.config = TrainConfig::from_json(j.at("config"));
    ckpt.epochs_run = j.at("meta").at("epochs_run").get<int>();
    for (const auto& r : j.at("meta").at("history"))
        ckpt.history.push_back(TrainRecord{r.at("phase").get<std::string>(),
                                           r.at("epoch").get<int>(),
                                           r.at("train_loss").get<double>(),
                                           r.at("val_loss").get<double>()});
    for (const auto& p : j.at("params")) {
        Matrix m(p.at("rows").get<Index>(), p.at("cols").get<Index>());
        const auto& data = p.at("data");
        if (static_cast<Index>(data.size()) != m.size())
            throw std::runtime_error("checkpoint: parameter " + p.at("name").get<std::string>() +
                                     " has wrong element count");
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = data[i].get<double>();
        ckpt.values.emplace_back(p.at("name").get<std::string>(), std::move(m));
    }
    return ckpt;
}

std::vector<std::uint8_t> effective_valid(const PaddedBatch& batch, bool all_positions) {
    if (all_positions) return batch.valid_target;
    std::vector<std::uint8_t> out(batch.valid_target.size(), 0);
    for (int b = 0; b < batch.batch; ++b) {
        for (int t = batch.seq - 1; t >= 0; --t) {
            const Index r = static_cast<Index>(b) * batch.seq + t;
            if (batch.valid_target[r]) {
                out[r] = 1;
                break;
            }
        }
    }
    return out;
}

Var batch_loss(Model& model, Tape& tape, const PaddedBatch& batch, const City& city,
               bool all_positions) {
    auto fwd = model.forward(tape, batch, city);
    return ce_loss_masked(fwd.logits, batch.targets, effective_valid(batch, all_positions));
}

double mean_val_loss(Model& model, const std::vector<CityDataset>& data, const TrainConfig& cfg) {
    double total = 0.0;
    int cities = 0;
    for (const auto& ds : data) {
        if (ds.val.empty()) continue;
        double nll = 0.0;
        long count = 0;
        for (std::size_t i = 0; i < ds.val.size(); i += cfg.batch_size) {
            const std::size_t end = std::min(ds.val.size(), i + cfg.batch_size);
            std::vector<Trajectory> chunk(ds.val.begin() + i, ds.val.begin() + end);
            PaddedBatch batch = pad_batch(chunk, ds.city, cfg.model.seq_len);
            const auto valid = effective_valid(batch, cfg.loss_all_positions);
            Tape tape;
            auto fwd = model.forward(tape, batch, ds.city);
            Var loss = ce_loss_masked(fwd.logits, batch.targets, valid);
            const long n = std::count(valid.begin(), valid.end(), 1);
            nll += loss.value()(0, 0) * static_cast<double>(n);
            count += n;
        }
        total += nll / static_cast<double>(count);
        ++cities;
    }
    return cities == 0 ? -1.0 : total / cities;
}

namespace {

// Per-city shuffled queue of training indices; reshuffles when drained.
class IndexQueue {
  public:
    IndexQueue(int n, std::uint64_t seed) : rng_(seed), order_(n) {
        std::iota(order_.begin(), order_.end(), 0);
        refill();
    }

    int next() {
        if (cursor_ >= order_.size()) refill();
        return order_[cursor_++];
    }

  private:
    void refill() {
        seeded_shuffle(order_, rng_);
        cursor_ = 0;
    }

    Rng rng_;
    std::vector<int> order_;
    std::size_t cursor_ = 0;
};

std::vector<std::pair<std::string, Matrix>> snapshot(const Model& model) {
    std::vector<std::pair<std::string, Matrix>> out;
    for (const auto& p : model.params()) out.emplace_back(p->name, p->value);
    return out;
}

}  // namespace

Checkpoint pretrain(const std::vector<CityDataset>& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("pretrain: no city datasets");
    std::size_t total = 0;
    for (const auto& ds : data) {
        if (ds.train.empty())
            throw std::invalid_argument("pretrain: city " + std::to_string(ds.city.city_id) +
                                        " has an empty training split");
        total += ds.train.size();
    }

    Model model(cfg.model);
    model.init_params(cfg.seed);
    AdamW opt(cfg.optimizer());
    Rng rng(derive_seed(cfg.seed, "pretrain-loop"));

    std::vector<IndexQueue> queues;
    for (const auto& ds : data)
        queues.emplace_back(static_cast<int>(ds.train.size()),
                            derive_seed(cfg.seed, "pretrain-queue",
                                        static_cast<std::uint64_t>(ds.city.city_id)));

    const int steps_per_epoch =
        static_cast<int>((total + cfg.batch_size - 1) / cfg.batch_size);

    Checkpoint best = Checkpoint::from_model(model, cfg);
    double best_val = std::numeric_limits<double>::infinity();
    bool have_best = false;
    int bad_epochs = 0;

    std::vector<TrainRecord> history;
    int epochs_run = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            int ci;
            if (cfg.city_sampling_proportional) {
                std::uint64_t pick = rng.below(total);
                ci = 0;
                for (std::size_t acc = data[0].train.size();
                     pick >= acc && ci + 1 < static_cast<int>(data.size());
                     acc += data[++ci].train.size()) {}
            } else {
                ci = rng.below_int(static_cast<int>(data.size()));
            }
            const CityDataset& ds = data[ci];
            std::vector<Trajectory> chunk;
            chunk.reserve(cfg.batch_size);
            for (int i = 0; i < cfg.batch_size; ++i)
                chunk.push_back(ds.train[queues[ci].next()]);
            PaddedBatch batch = pad_batch(chunk, ds.city, cfg.model.seq_len);
            Tape tape;
            Var loss = batch_loss(model, tape, batch, ds.city, cfg.loss_all_positions);
            loss_sum += loss.value()(0, 0);
            tape.backward(loss);
            opt.step(model.params());
        }
        const double train_loss = loss_sum / steps_per_epoch;
        const double val = mean_val_loss(model, data, cfg);
        history.push_back(TrainRecord{"pretrain", epoch, train_loss, val});
        epochs_run = epoch;

        const double monitored = val >= 0.0 ? val : train_loss;
        if (monitored < best_val) {
            best_val = monitored;
            best = Checkpoint::from_model(model, cfg);
            have_best = true;
            bad_epochs = 0;
        } else {
            ++bad_epochs;
        }
        if (bad_epochs >= cfg.patience) break;
    }

    if (!have_best) best = Checkpoint::from_model(model, cfg);
    best.epochs_run = epochs_run;
    best.history = std::move(history);
    return best;
}

int subsample_count(std::size_t available, double fraction) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw std::invalid_argument("finetune: fraction must be in (0, 1]");
    const int count = static_cast<int>(fraction * static_cast<double>(available) + 1e-9);
    if (count == 0)
        throw std::invalid_argument("finetune: fraction " + std::to_string(fraction) +
                                    " of " + std::to_string(available) +
                                    " trajectories selects none");
    return count;
}

Checkpoint finetune(const Checkpoint& start, const CityDataset& target, double fraction,
                    int epochs) {
    const TrainConfig& cfg = start.config;
    cfg.validate();
    if (epochs < 0) throw std::invalid_argument("finetune: epochs must be >= 0");

    const int count = subsample_count(target.train.size(), fraction);
    std::vector<int> order(target.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng sub_rng(derive_seed(cfg.seed, "finetune-subsample",
                            static_cast<std::uint64_t>(target.city.city_id)));
    seeded_shuffle(order, sub_rng);
    order.resize(count);

    Model model = start.instantiate();
    AdamW opt(cfg.optimizer());
    Rng rng(derive_seed(cfg.seed, "finetune-loop",
                        static_cast<std::uint64_t>(target.city.city_id)));

    Checkpoint out = start;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        seeded_shuffle(order, rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), i + cfg.batch_size);
            std::vector<Trajectory> chunk;
            for (std::size_t j = i; j < end; ++j) chunk.push_back(target.train[order[j]]);
            PaddedBatch batch = pad_batch(chunk, target.city, cfg.model.seq_len);
            Tape tape;
            Var loss = batch_loss(model, tape, batch, target.city, cfg.loss_all_positions);
            loss_sum += loss.value()(0, 0);
            tape.backward(loss);
            opt.step(model.params());
            ++batches;
        }
        out.history.push_back(
            TrainRecord{"finetune", epoch, batches ? loss_sum / batches : 0.0, -1.0});
    }
    out.values = snapshot(model);
    return out;
}

}  // namespace trajmoe
