#include "pavecrack/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "pavecrack/errors.hpp"

namespace pavecrack {
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    if (total_epochs < 0) throw DomainError("total_epochs must be >= 0");
    if (finetune_start_epoch < 0 || finetune_start_epoch > total_epochs) {
        throw DomainError("finetune_start_epoch must lie in [0, total_epochs]");
    }
    if (batch_size <= 0) throw DomainError("batch_size must be positive");
    if (!(phase1_learning_rate > 0) || !(phase2_learning_rate > 0)) {
        throw DomainError("learning rates must be positive");
    }
    if (!(phase2_learning_rate < phase1_learning_rate)) {
        throw DomainError("phase2_learning_rate must be lower than phase1_learning_rate");
    }
    if (replicates <= 0) throw DomainError("replicates must be positive");
    if (seeds.size() != static_cast<std::size_t>(replicates)) {
        throw DomainError("expected " + std::to_string(replicates) + " seeds, got " + std::to_string(seeds.size()));
    }
    if (!(unfreeze_fraction >= 0 && unfreeze_fraction <= 1)) {
        throw DomainError("unfreeze_fraction must lie in [0, 1]");
    }
    if (loss != "binary_crossentropy") throw DomainError("unsupported loss '" + loss + "'");
    if (optimizer != "adam") throw DomainError("unsupported optimizer '" + optimizer + "'");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw FormatError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        T out{};
        if constexpr (std::is_same_v<T, double>) out = std::stod(v, &used);
        else if constexpr (std::is_same_v<T, std::uint64_t>) out = std::stoull(v, &used);
        else out = static_cast<T>(std::stoll(v, &used));
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw FormatError("config key '" + key + "': bad number '" + v + "'");
    }
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (key == "total_epochs") total_epochs = parse_number<int>(key, v);
    else if (key == "finetune_start_epoch") finetune_start_epoch = parse_number<int>(key, v);
    else if (key == "batch_size") batch_size = parse_number<int>(key, v);
    else if (key == "phase1_learning_rate") phase1_learning_rate = parse_number<double>(key, v);
    else if (key == "phase2_learning_rate") phase2_learning_rate = parse_number<double>(key, v);
    else if (key == "replicates") {
        replicates = parse_number<int>(key, v);
        seeds.clear();
        for (int i = 1; i <= replicates; ++i) seeds.push_back(static_cast<std::uint64_t>(i));
    } else if (key == "augmented") augmented = parse_bool(key, v);
    else if (key == "unfreeze_fraction") unfreeze_fraction = parse_number<double>(key, v);
    else if (key == "seeds") {
        seeds.clear();
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!trim(item).empty()) seeds.push_back(parse_number<std::uint64_t>(key, trim(item)));
        }
    } else if (key == "loss") loss = v;
    else if (key == "optimizer") optimizer = v;
    else if (key == "save_best") save_best = parse_bool(key, v);
    else throw FormatError("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return from_text(buf.str());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

TrainConfig TrainConfig::from_text(const std::string& text) {
    std::istringstream in(text);
    std::map<std::string, std::string> values;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("line " + std::to_string(lineno) + ": expected key = value");
        }
        values[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    TrainConfig c;
    // replicates resets the seed list, so it goes before an explicit seeds entry.
    if (auto it = values.find("replicates"); it != values.end()) {
        c.set(it->first, it->second);
        values.erase(it);
    }
    for (const auto& [k, v] : values) c.set(k, v);
    return c;
}

std::string TrainConfig::to_text() const {
    std::ostringstream out;
    out << "total_epochs = " << total_epochs << "\n"
        << "finetune_start_epoch = " << finetune_start_epoch << "\n"
        << "batch_size = " << batch_size << "\n"
        << "phase1_learning_rate = " << fmt_double(phase1_learning_rate) << "\n"
        << "phase2_learning_rate = " << fmt_double(phase2_learning_rate) << "\n"
        << "replicates = " << replicates << "\n"
        << "augmented = " << (augmented ? "true" : "false") << "\n"
        << "unfreeze_fraction = " << fmt_double(unfreeze_fraction) << "\n"
        << "seeds = ";
    for (std::size_t i = 0; i < seeds.size(); ++i) out << (i ? "," : "") << seeds[i];
    out << "\n"
        << "loss = " << loss << "\n"
        << "optimizer = " << optimizer << "\n"
        << "save_best = " << (save_best ? "true" : "false") << "\n";
    return out.str();
}

std::string_view phase_name(Phase phase) {
    return phase == Phase::HeadOnly ? "head-only" : "fine-tune";
}

Phase parse_phase(std::string_view name) {
    if (name == "head-only") return Phase::HeadOnly;
    if (name == "fine-tune") return Phase::FineTune;
    throw FormatError("unknown phase '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// History CSV

void write_history_csv(const RunHistory& history, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw PersistenceError("cannot write history '" + path.string() + "'");
    out << "epoch,phase,train_loss,train_acc,val_loss,val_acc,trainable_params\n";
    for (const auto& r : history.records) {
        out << r.epoch << ',' << phase_name(r.phase) << ',' << fmt_double(r.train_loss) << ','
            << fmt_double(r.train_accuracy) << ',' << fmt_double(r.val_loss) << ',' << fmt_double(r.val_accuracy)
            << ',' << r.trainable_parameter_count << '\n';
    }
    if (!out) throw PersistenceError("failed writing history '" + path.string() + "'");
}

std::vector<EpochRecord> read_history_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read history '" + path.string() + "'");
    std::string line;
    std::getline(in, line);
    if (trim(line) != "epoch,phase,train_loss,train_acc,val_loss,val_acc,trainable_params") {
        throw FormatError("'" + path.string() + "' is not a run history CSV");
    }
    std::vector<EpochRecord> out;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) f.push_back(item);
        if (f.size() != 7) throw FormatError("history row with " + std::to_string(f.size()) + " fields");
        EpochRecord r;
        r.epoch = parse_number<int>("epoch", f[0]);
        r.phase = parse_phase(f[1]);
        r.train_loss = parse_number<double>("train_loss", f[2]);
        r.train_accuracy = parse_number<double>("train_acc", f[3]);
        r.val_loss = parse_number<double>("val_loss", f[4]);
        r.val_accuracy = parse_number<double>("val_acc", f[5]);
        r.trainable_parameter_count = parse_number<std::uint64_t>("trainable_params", f[6]);
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<float> targets_of(const std::vector<PatchSample>& batch) {
    std::vector<float> t;
    t.reserve(batch.size());
    for (const auto& s : batch) {
        if (s.label == Label::Unlabeled) throw DataError("unlabeled sample in training data");
        t.push_back(s.label == Label::Positive ? 1.0f : 0.0f);
    }
    return t;
}

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x7261696eU};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

StreamScore score_stream(const ClassifierModel& model, const SampleSource& samples, int batch_size) {
    if (samples.size() == 0) throw DataError("cannot score an empty stream");
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<PatchSample> batch;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        batch.push_back(samples.load(i));
        if (batch.size() == static_cast<std::size_t>(batch_size) || i + 1 == samples.size()) {
            const auto logits = model.logits(preprocess_batch(batch, model.spec()));
            const auto targets = targets_of(batch);
            loss_sum += nn::binary_cross_entropy(logits, targets, nullptr) * static_cast<double>(batch.size());
            for (std::size_t k = 0; k < logits.size(); ++k) {
                if ((nn::sigmoid(logits[k]) >= 0.5f) == (targets[k] >= 0.5f)) ++correct;
            }
            batch.clear();
        }
    }
    const double n = static_cast<double>(samples.size());
    return {loss_sum / n, static_cast<double>(correct) / n};
}

std::vector<EpochRecord> train_phase(ClassifierModel& model, const SampleSource& train, const SampleSource& val,
                                     const PhaseOptions& options) {
    if (options.epochs < 0) throw DomainError("epoch count must be >= 0");
    if (options.epochs == 0) return {};
    if (train.size() == 0) throw DataError("training stream is empty");
    if (val.size() == 0) throw DataError("validation stream is empty");
    if (options.batch_size <= 0) throw DomainError("batch_size must be positive");
    if (!(options.learning_rate > 0)) throw DomainError("learning rate must be positive");

    nn::AdamOptions adam;
    adam.learning_rate = options.learning_rate;
    const std::size_t trainable = model.trainable_parameter_count();

    std::vector<EpochRecord> records;
    std::vector<std::size_t> order(train.size());
    for (int e = 0; e < options.epochs; ++e) {
        const int epoch = options.start_epoch + e;
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(epoch_seed(options.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(options.batch_size)) {
            const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(options.batch_size));
            std::vector<PatchSample> batch;
            batch.reserve(end - b);
            for (std::size_t i = b; i < end; ++i) batch.push_back(train.load(order[i]));
            const auto step = model.train_step(preprocess_batch(batch, model.spec()), targets_of(batch), adam);
            if (!std::isfinite(step.loss)) {
                throw DivergenceError(epoch, "non-finite training loss at epoch " + std::to_string(epoch));
            }
            loss_sum += step.loss * static_cast<double>(batch.size());
            correct += step.correct;
        }

        EpochRecord r;
        r.epoch = epoch;
        r.phase = options.phase;
        r.train_loss = loss_sum / static_cast<double>(train.size());
        r.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
        const auto v = score_stream(model, val, options.batch_size);
        if (!std::isfinite(v.loss)) {
            throw DivergenceError(epoch, "non-finite validation loss at epoch " + std::to_string(epoch));
        }
        r.val_loss = v.loss;
        r.val_accuracy = v.accuracy;
        r.trainable_parameter_count = trainable;
        r.learning_rate = options.learning_rate;
        spdlog::info("epoch {} [{}] loss {:.4f} acc {:.4f} val_loss {:.4f} val_acc {:.4f}", epoch,
                     phase_name(r.phase), r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy);
        if (options.on_epoch_end) options.on_epoch_end(r, model);
        records.push_back(r);
    }
    return records;
}

std::string_view variant_tag(bool augmented) {
    return augmented ? "aug" : "noaug";
}

std::string checkpoint_name(const std::string& backbone, bool augmented, std::uint64_t seed, int epoch) {
    return backbone + "_" + std::string(variant_tag(augmented)) + "_seed" + std::to_string(seed) + "_epoch" +
           std::to_string(epoch) + ".pcw";
}

RunHistory run_experiment(const ModelFactory& factory, const SampleSource& train, const SampleSource& val,
                          const TrainConfig& config, std::uint64_t seed, const fs::path& checkpoint_dir) {
    config.validate();
    ClassifierModel model = factory(seed);
    model.freeze_backbone();

    RunHistory h;
    h.config = config;
    h.seed = seed;
    h.backbone = model.spec().name;

    auto save = [&](const ClassifierModel& m, const std::string& file, int epoch) {
        if (checkpoint_dir.empty()) return fs::path{};
        const fs::path p = checkpoint_dir / file;
        try {
            m.save_checkpoint(p, {{"seed", std::to_string(seed)},
                                  {"epoch", std::to_string(epoch)},
                                  {"augmented", config.augmented ? "true" : "false"}});
        } catch (const PersistenceError&) {
            throw;
        } catch (const std::exception& e) {
            throw PersistenceError("checkpoint write failed for '" + p.string() + "': " + e.what());
        }
        return p;
    };

    double best_val = -1.0;
    PhaseOptions opts;
    opts.batch_size = config.batch_size;
    opts.seed = seed;
    if (config.save_best) {
        opts.on_epoch_end = [&](const EpochRecord& r, const ClassifierModel& m) {
            if (r.val_accuracy > best_val) {
                best_val = r.val_accuracy;
                const std::string stem = h.backbone + "_" + std::string(variant_tag(config.augmented)) + "_seed" +
                                         std::to_string(seed) + "_best.pcw";
                save(m, stem, r.epoch + 1);
            }
        };
    }

    opts.epochs = config.finetune_start_epoch;
    opts.learning_rate = config.phase1_learning_rate;
    opts.start_epoch = 0;
    opts.phase = Phase::HeadOnly;
    h.records = train_phase(model, train, val, opts);

    const int remaining = config.total_epochs - config.finetune_start_epoch;
    if (remaining > 0 && config.finetune_start_epoch > 0) {
        save(model, checkpoint_name(h.backbone, config.augmented, seed, config.finetune_start_epoch),
             config.finetune_start_epoch);
    }
    model.unfreeze_top(config.unfreeze_fraction);
    spdlog::info("{} seed {}: {} of {} units trainable from epoch {}", h.backbone, seed, model.trainable_unit_count(),
                 model.layer_count(), config.finetune_start_epoch);

    opts.epochs = remaining;
    opts.learning_rate = config.phase2_learning_rate;
    opts.start_epoch = config.finetune_start_epoch;
    opts.phase = Phase::FineTune;
    auto tail = train_phase(model, train, val, opts);
    h.records.insert(h.records.end(), tail.begin(), tail.end());

    h.final_checkpoint = save(model, checkpoint_name(h.backbone, config.augmented, seed, config.total_epochs),
                              config.total_epochs);
    return h;
}

namespace {
ModelFactory archive_factory(const BackboneSpec& backbone, double unfreeze_fraction) {
    std::shared_ptr<BackboneProvider> provider = default_provider(backbone, ArchiveProvider::default_cache_dir());
    BackboneSpec spec = backbone;
    spec.unfreeze_fraction = unfreeze_fraction;
    return [provider, spec](std::uint64_t seed) { return instantiate(spec, *provider, seed); };
}
}  // namespace

RunHistory run_experiment(const BackboneSpec& backbone, const DatasetManifest& manifest, const TrainConfig& config,
                          std::uint64_t seed, const fs::path& checkpoint_dir) {
    const auto train = load_split(manifest, Split::Train);
    const auto val = load_split(manifest, Split::Val);
    return run_experiment(archive_factory(backbone, config.unfreeze_fraction), train, val, config, seed,
                          checkpoint_dir);
}

ExperimentRecord run_replicates(const ModelFactory& factory, const SampleSource& train, const SampleSource& val,
                                const TrainConfig& config, const fs::path& out_dir) {
    config.validate();
    ExperimentRecord record;
    record.augmented = config.augmented;
    for (const auto seed : config.seeds) {
        try {
            RunHistory h = run_experiment(factory, train, val, config, seed, out_dir);
            record.backbone = h.backbone;
            if (!out_dir.empty()) {
                write_history_csv(h, out_dir / ("history_seed" + std::to_string(seed) + ".csv"));
            }
            record.runs.push_back(std::move(h));
        } catch (const std::exception& e) {
            spdlog::error("replicate seed {} failed: {}", seed, e.what());
            record.failures.push_back({seed, e.what()});
        }
    }
    return record;
}

ExperimentRecord run_replicates(const BackboneSpec& backbone, const DatasetManifest& manifest,
                                const TrainConfig& config, const fs::path& out_dir) {
    const auto train = load_split(manifest, Split::Train);
    const auto val = load_split(manifest, Split::Val);
    auto record = run_replicates(archive_factory(backbone, config.unfreeze_fraction), train, val, config, out_dir);
    record.backbone = backbone.name;
    return record;
}

void write_experiment_summary(const ExperimentRecord& record, const TrainConfig& config, const fs::path& out_dir) {
    nlohmann::json j;
    j["backbone"] = record.backbone;
    j["variant"] = std::string(variant_tag(config.augmented));
    j["finetune_start_epoch"] = config.finetune_start_epoch;
    j["total_epochs"] = config.total_epochs;
    j["phase1_learning_rate"] = config.phase1_learning_rate;
    j["phase2_learning_rate"] = config.phase2_learning_rate;
    j["config"] = config.to_text();
    j["runs"] = nlohmann::json::array();
    for (const auto& h : record.runs) {
        j["runs"].push_back({{"seed", h.seed},
                             {"status", "ok"},
                             {"history", "history_seed" + std::to_string(h.seed) + ".csv"},
                             {"checkpoint", h.final_checkpoint.filename().string()}});
    }
    for (const auto& f : record.failures) {
        j["runs"].push_back({{"seed", f.seed}, {"status", "failed"}, {"error", f.error}});
    }
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / "experiment.json", std::ios::trunc);
    if (!out) throw PersistenceError("cannot write experiment summary in '" + out_dir.string() + "'");
    out << j.dump(2) << "\n";
}

}  // namespace pavecrack
