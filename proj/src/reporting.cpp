#include "pavecrack/reporting.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pavecrack/errors.hpp"

namespace pavecrack {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

double parse_double(const std::string& text, const std::string& where) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size()) throw FormatError(where + ": bad number '" + text + "'");
    return v;
}

std::ofstream open_out(const fs::path& path) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    return out;
}

struct NamedSeries {
    const char* name;
    SeriesBand CurveBand::*band;
    double EpochRecord::*value;
};

constexpr NamedSeries kSeries[] = {
    {"train_loss", &CurveBand::train_loss, &EpochRecord::train_loss},
    {"val_loss", &CurveBand::val_loss, &EpochRecord::val_loss},
    {"train_accuracy", &CurveBand::train_accuracy, &EpochRecord::train_accuracy},
    {"val_accuracy", &CurveBand::val_accuracy, &EpochRecord::val_accuracy},
};

}  // namespace

// ---------------------------------------------------------------------------
// Curves

CurveBand build_curves(const std::vector<RunHistory>& histories) {
    if (histories.empty()) throw DataError("no histories to build curves from");
    const auto& first = histories.front();
    const std::size_t n = first.records.size();
    if (n == 0) throw ShapeError("history has no epochs");
    for (const auto& h : histories) {
        if (h.records.size() != n) {
            throw ShapeError("histories differ in length: " + std::to_string(n) + " vs " +
                             std::to_string(h.records.size()));
        }
        if (h.config.finetune_start_epoch != first.config.finetune_start_epoch ||
            h.config.total_epochs != first.config.total_epochs) {
            throw ShapeError("histories use different training schedules");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (h.records[i].epoch != first.records[i].epoch) throw ShapeError("histories differ in epoch numbering");
        }
    }

    CurveBand band;
    band.finetune_start_epoch = first.config.finetune_start_epoch;
    band.replicates = histories.size();
    for (const auto& r : first.records) band.epochs.push_back(r.epoch);
    for (const auto& s : kSeries) {
        SeriesBand& out = band.*(s.band);
        out.mean.resize(n);
        out.min.resize(n);
        out.max.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            // Sorted before summing so the mean does not depend on replicate order.
            std::vector<double> values;
            for (const auto& h : histories) values.push_back(h.records[i].*(s.value));
            std::sort(values.begin(), values.end());
            double sum = 0.0;
            for (const double v : values) sum += v;
            out.mean[i] = std::clamp(sum / static_cast<double>(values.size()), values.front(), values.back());
            out.min[i] = values.front();
            out.max[i] = values.back();
        }
    }
    return band;
}

void write_curves_csv(const CurveBand& band, const fs::path& path) {
    auto out = open_out(path);
    out << "# finetune_start_epoch=" << band.finetune_start_epoch << " replicates=" << band.replicates << "\n";
    out << "epoch,metric,mean,min,max\n";
    for (const auto& s : kSeries) {
        const SeriesBand& b = band.*(s.band);
        for (std::size_t i = 0; i < band.length(); ++i) {
            out << band.epochs[i] << ',' << s.name << ',' << full(b.mean[i]) << ',' << full(b.min[i]) << ','
                << full(b.max[i]) << '\n';
        }
    }
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

CurveBand read_curves_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    CurveBand band;
    std::string line;
    std::map<std::string, std::map<int, std::array<double, 3>>> rows;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::sscanf(line.c_str(), "# finetune_start_epoch=%d replicates=%zu", &band.finetune_start_epoch,
                        &band.replicates);
            continue;
        }
        if (!header) {
            if (line != "epoch,metric,mean,min,max") throw FormatError("'" + path.string() + "' is not a curves CSV");
            header = true;
            continue;
        }
        const auto f = split_csv(line);
        if (f.size() != 5) throw FormatError(path.string() + ": expected 5 fields");
        const int epoch = static_cast<int>(parse_double(f[0], path.string()));
        rows[f[1]][epoch] = {parse_double(f[2], path.string()), parse_double(f[3], path.string()),
                             parse_double(f[4], path.string())};
    }
    for (const auto& s : kSeries) {
        const auto it = rows.find(s.name);
        if (it == rows.end()) throw FormatError(path.string() + ": missing metric " + s.name);
        SeriesBand& b = band.*(s.band);
        std::vector<int> epochs;
        for (const auto& [e, v] : it->second) {
            epochs.push_back(e);
            b.mean.push_back(v[0]);
            b.min.push_back(v[1]);
            b.max.push_back(v[2]);
        }
        if (band.epochs.empty()) band.epochs = epochs;
        else if (band.epochs != epochs) throw ShapeError(path.string() + ": metrics cover different epochs");
    }
    return band;
}

// ---------------------------------------------------------------------------
// Tables

std::string experiment_label(const std::string& backbone, bool augmented) {
    return backbone + (augmented ? " Aug" : " Non-Aug");
}

std::optional<double> Table::at(const std::string& row, const std::string& column) const {
    const auto r = std::find(rows.begin(), rows.end(), row);
    const auto c = std::find(columns.begin(), columns.end(), column);
    if (r == rows.end() || c == columns.end()) throw DomainError("no cell (" + row + ", " + column + ")");
    return cells[static_cast<std::size_t>(r - rows.begin())][static_cast<std::size_t>(c - columns.begin())];
}

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::vector<const ExperimentSummary*> ordered(const std::vector<ExperimentSummary>& experiments) {
    if (experiments.empty()) throw DataError("no experiments to tabulate");
    std::set<std::pair<std::string, bool>> seen;
    std::vector<const ExperimentSummary*> out;
    for (const auto& e : experiments) {
        if (!seen.insert({e.backbone, e.augmented}).second) {
            throw UniquenessError("duplicate experiment " + experiment_label(e.backbone, e.augmented));
        }
        out.push_back(&e);
    }
    std::sort(out.begin(), out.end(), [](const ExperimentSummary* a, const ExperimentSummary* b) {
        const auto ka = std::make_tuple(lower(a->backbone), a->backbone, a->augmented);
        const auto kb = std::make_tuple(lower(b->backbone), b->backbone, b->augmented);
        return ka < kb;
    });
    return out;
}

std::optional<double> mean_of(const MeanSd& m) {
    if (!m.defined()) return std::nullopt;
    return m.mean;
}

std::optional<double> sd_of(const MeanSd& m) {
    if (!m.defined()) return std::nullopt;
    return m.sd;
}

}  // namespace

Table make_table1(const std::vector<ExperimentSummary>& experiments) {
    Table t;
    t.rows = table1_rows();
    t.cells.assign(t.rows.size(), {});
    for (const auto* e : ordered(experiments)) {
        t.columns.push_back(experiment_label(e->backbone, e->augmented));
        const auto& s = e->stats;
        const std::optional<double> column[] = {
            mean_of(s.precision),
            mean_of(s.recall),
            mean_of(s.accuracy),
            sd_of(s.accuracy),
            mean_of(s.f1),
            sd_of(s.f1),
            s.accuracy_boost ? mean_of(*s.accuracy_boost) : std::nullopt,
            s.loss_reduction ? mean_of(*s.loss_reduction) : std::nullopt,
        };
        for (std::size_t r = 0; r < t.rows.size(); ++r) t.cells[r].push_back(column[r]);
    }
    return t;
}

Table make_table2(const std::vector<ExperimentSummary>& experiments) {
    Table t;
    t.rows = table2_rows();
    t.cells.assign(t.rows.size(), {});
    for (const auto* e : ordered(experiments)) {
        t.columns.push_back(experiment_label(e->backbone, e->augmented));
        t.cells[0].push_back(e->confusion.tp);
        t.cells[1].push_back(e->confusion.fp);
        t.cells[2].push_back(e->confusion.tn);
        t.cells[3].push_back(e->confusion.fn);
    }
    return t;
}

void write_table_csv(const Table& table, const fs::path& path, int decimals) {
    auto out = open_out(path);
    out << "Metric";
    for (const auto& c : table.columns) out << ',' << c;
    out << '\n';
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        out << table.rows[r];
        for (const auto& cell : table.cells[r]) {
            out << ',';
            if (!cell) continue;
            if (decimals < 0) {
                out << full(*cell);
            } else {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.*f", decimals, *cell);
                out << buf;
            }
        }
        out << '\n';
    }
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Table read_table_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw FormatError("'" + path.string() + "' is empty");
    auto head = split_csv(line);
    if (head.empty() || head[0] != "Metric") throw FormatError("'" + path.string() + "' is not a result table");
    t.columns.assign(head.begin() + 1, head.end());
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        auto f = split_csv(line);
        if (f.size() != t.columns.size() + 1) throw FormatError(path.string() + ": ragged row '" + f[0] + "'");
        t.rows.push_back(f[0]);
        std::vector<std::optional<double>> row;
        for (std::size_t i = 1; i < f.size(); ++i) {
            if (f[i].empty()) row.push_back(std::nullopt);
            else row.push_back(parse_double(f[i], path.string()));
        }
        t.cells.push_back(std::move(row));
    }
    return t;
}

TableFiles emit_tables(const std::vector<ExperimentSummary>& experiments, const fs::path& out_dir) {
    const Table t1 = make_table1(experiments);
    const Table t2 = make_table2(experiments);
    TableFiles files{out_dir / "table1.csv", out_dir / "table1_pretty.csv", out_dir / "table2.csv",
                     out_dir / "table2_pretty.csv"};
    write_table_csv(t1, files.table1);
    write_table_csv(t1, files.table1_pretty, 4);
    write_table_csv(t2, files.table2);
    write_table_csv(t2, files.table2_pretty, 0);
    return files;
}

// ---------------------------------------------------------------------------
// Figures

namespace {

constexpr int kWidth = 960;
constexpr int kHeight = 600;
constexpr int kLeft = 90, kRight = 30, kTop = 50, kBottom = 70;

const cv::Scalar kTrainColor(180, 119, 31);  // BGR
const cv::Scalar kValColor(14, 127, 255);
const cv::Scalar kAxisColor(40, 40, 40);
const cv::Scalar kGridColor(225, 225, 225);
const cv::Scalar kMarkerColor(90, 90, 90);

double nice_step(double span, int target) {
    const double raw = span / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    for (const double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
        if (raw <= m * mag) return m * mag;
    }
    return 10 * mag;
}

std::string tick_label(double v, double step) {
    char buf[32];
    const int digits = std::max(0, static_cast<int>(-std::floor(std::log10(step) + 1e-9)) + (step < 1 ? 1 : 0));
    std::snprintf(buf, sizeof buf, "%.*f", std::min(digits, 4), v);
    return buf;
}

FigureInfo draw_figure(const CurveBand& band, const SeriesBand& train, const SeriesBand& val, const std::string& title,
                       const std::string& y_label, const fs::path& image_path) {
    FigureInfo info;
    info.width = kWidth;
    info.height = kHeight;
    info.marker_epoch = band.finetune_start_epoch;
    info.x_min = 0;
    info.x_max = band.total_epochs();

    double lo = std::min(*std::min_element(train.min.begin(), train.min.end()),
                         *std::min_element(val.min.begin(), val.min.end()));
    double hi = std::max(*std::max_element(train.max.begin(), train.max.end()),
                         *std::max_element(val.max.begin(), val.max.end()));
    const double pad = hi > lo ? 0.05 * (hi - lo) : 0.05 * std::max(1.0, std::abs(hi));
    info.y_min = lo - pad;
    info.y_max = hi + pad;

    cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
    const int pw = kWidth - kLeft - kRight;
    const int ph = kHeight - kTop - kBottom;
    auto px = [&](double x) { return kLeft + static_cast<int>(std::lround((x - info.x_min) / (info.x_max - info.x_min) * pw)); };
    auto py = [&](double y) {
        return kTop + static_cast<int>(std::lround((info.y_max - y) / (info.y_max - info.y_min) * ph));
    };
    // Epoch record i is plotted at x = i + 1, the end of that epoch.
    auto ex = [&](std::size_t i) { return px(static_cast<double>(band.epochs[i]) + 1.0); };

    const double ystep = nice_step(info.y_max - info.y_min, 6);
    for (double y = std::ceil(info.y_min / ystep) * ystep; y <= info.y_max + 1e-12; y += ystep) {
        cv::line(img, {kLeft, py(y)}, {kLeft + pw, py(y)}, kGridColor, 1);
        cv::line(img, {kLeft - 5, py(y)}, {kLeft, py(y)}, kAxisColor, 1);
        cv::putText(img, tick_label(y, ystep), {8, py(y) + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, kAxisColor, 1,
                    cv::LINE_AA);
    }
    const double xstep = nice_step(info.x_max - info.x_min, 8);
    for (double x = 0; x <= info.x_max + 1e-12; x += xstep) {
        cv::line(img, {px(x), kTop + ph}, {px(x), kTop + ph + 5}, kAxisColor, 1);
        const std::string s = tick_label(x, std::max(1.0, xstep));
        cv::putText(img, s, {px(x) - 4 * static_cast<int>(s.size()), kTop + ph + 22}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                    kAxisColor, 1, cv::LINE_AA);
    }

    for (const auto* s : {&train, &val}) {
        const cv::Scalar color = s == &train ? kTrainColor : kValColor;
        std::vector<cv::Point> poly;
        for (std::size_t i = 0; i < band.length(); ++i) poly.push_back({ex(i), py(s->max[i])});
        for (std::size_t i = band.length(); i-- > 0;) poly.push_back({ex(i), py(s->min[i])});
        cv::Mat layer = img.clone();
        cv::fillPoly(layer, std::vector<std::vector<cv::Point>>{poly}, color, cv::LINE_8);
        cv::addWeighted(layer, 0.25, img, 0.75, 0.0, img);
    }
    for (const auto* s : {&train, &val}) {
        const cv::Scalar color = s == &train ? kTrainColor : kValColor;
        std::vector<cv::Point> line;
        for (std::size_t i = 0; i < band.length(); ++i) line.push_back({ex(i), py(s->mean[i])});
        cv::polylines(img, line, false, color, 2, cv::LINE_AA);
    }

    if (band.finetune_start_epoch > 0 && band.finetune_start_epoch < band.total_epochs()) {
        const int x = px(band.finetune_start_epoch);
        for (int y = kTop; y < kTop + ph; y += 12) {
            cv::line(img, {x, y}, {x, std::min(y + 6, kTop + ph)}, kMarkerColor, 1);
        }
        cv::putText(img, "fine-tune", {x + 4, kTop + 14}, cv::FONT_HERSHEY_SIMPLEX, 0.45, kMarkerColor, 1,
                    cv::LINE_AA);
    }

    cv::rectangle(img, {kLeft, kTop}, {kLeft + pw, kTop + ph}, kAxisColor, 1);
    cv::putText(img, title, {kLeft, 32}, cv::FONT_HERSHEY_SIMPLEX, 0.7, kAxisColor, 1, cv::LINE_AA);
    cv::putText(img, "Epoch", {kLeft + pw / 2 - 25, kHeight - 20}, cv::FONT_HERSHEY_SIMPLEX, 0.55, kAxisColor, 1,
                cv::LINE_AA);
    cv::putText(img, y_label, {8, kTop - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, kAxisColor, 1, cv::LINE_AA);
    const int lx = kLeft + pw - 150;
    cv::line(img, {lx, kTop + 20}, {lx + 25, kTop + 20}, kTrainColor, 2);
    cv::putText(img, "train", {lx + 32, kTop + 25}, cv::FONT_HERSHEY_SIMPLEX, 0.5, kAxisColor, 1, cv::LINE_AA);
    cv::line(img, {lx, kTop + 42}, {lx + 25, kTop + 42}, kValColor, 2);
    cv::putText(img, "validation", {lx + 32, kTop + 47}, cv::FONT_HERSHEY_SIMPLEX, 0.5, kAxisColor, 1, cv::LINE_AA);

    std::error_code ec;
    if (image_path.has_parent_path()) fs::create_directories(image_path.parent_path(), ec);
    bool ok = false;
    try {
        ok = cv::imwrite(image_path.string(), img);
    } catch (const cv::Exception&) {
        ok = false;
    }
    if (!ok) throw IoError("cannot write figure '" + image_path.string() + "'");
    info.image = image_path;

    info.metadata = fs::path(image_path).replace_extension(".json");
    json meta{{"image", image_path.filename().string()},
              {"title", title},
              {"x_range", {info.x_min, info.x_max}},
              {"y_range", {info.y_min, info.y_max}},
              {"finetune_start_epoch", info.marker_epoch},
              {"replicates", band.replicates},
              {"width", info.width},
              {"height", info.height}};
    auto out = open_out(info.metadata);
    out << meta.dump(2) << '\n';
    return info;
}

}  // namespace

PlotFiles render_plots(const CurveBand& band, const fs::path& out_dir, const std::string& stem) {
    if (band.length() == 0) throw DataError("cannot plot an empty band");
    PlotFiles files;
    files.accuracy = draw_figure(band, band.train_accuracy, band.val_accuracy, "Accuracy vs Epoch", "Accuracy",
                                 out_dir / (stem + "_accuracy.png"));
    files.loss = draw_figure(band, band.train_loss, band.val_loss, "Loss vs Epoch", "Loss",
                             out_dir / (stem + "_loss.png"));
    return files;
}

// ---------------------------------------------------------------------------
// Evaluation files and experiment directories

void write_evaluation_json(const EvaluationFile& e, const fs::path& path) {
    json j{{"backbone", e.backbone},
           {"variant", std::string(variant_tag(e.augmented))},
           {"threshold", e.threshold},
           {"runs", json::array()}};
    for (const auto& r : e.runs) {
        j["runs"].push_back({{"seed", r.seed},
                             {"tp", r.confusion.tp},
                             {"fp", r.confusion.fp},
                             {"tn", r.confusion.tn},
                             {"fn", r.confusion.fn}});
    }
    auto out = open_out(path);
    out << j.dump(2) << '\n';
}

EvaluationFile read_evaluation_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    try {
        const json j = json::parse(in);
        EvaluationFile e;
        e.backbone = j.at("backbone").get<std::string>();
        e.augmented = j.at("variant").get<std::string>() == "aug";
        e.threshold = j.value("threshold", 0.5);
        for (const auto& r : j.at("runs")) {
            RunEvaluation run;
            run.seed = r.at("seed").get<std::uint64_t>();
            run.confusion = {r.at("tp").get<std::uint64_t>(), r.at("fp").get<std::uint64_t>(),
                             r.at("tn").get<std::uint64_t>(), r.at("fn").get<std::uint64_t>()};
            e.runs.push_back(run);
        }
        return e;
    } catch (const json::exception& ex) {
        throw FormatError("'" + path.string() + "': " + ex.what());
    }
}

ExperimentDir load_experiment_dir(const fs::path& dir) {
    const fs::path summary = dir / "experiment.json";
    std::ifstream in(summary);
    if (!in) throw IoError("no experiment.json in '" + dir.string() + "'");
    ExperimentDir out;
    try {
        const json j = json::parse(in);
        out.backbone = j.at("backbone").get<std::string>();
        out.augmented = j.at("variant").get<std::string>() == "aug";
        const TrainConfig config = TrainConfig::from_text(j.at("config").get<std::string>());
        for (const auto& run : j.at("runs")) {
            if (run.value("status", "") != "ok") continue;
            RunHistory h;
            h.seed = run.at("seed").get<std::uint64_t>();
            h.config = config;
            h.backbone = out.backbone;
            h.records = read_history_csv(dir / run.at("history").get<std::string>());
            if (run.contains("checkpoint")) h.final_checkpoint = dir / run.at("checkpoint").get<std::string>();
            out.histories.push_back(std::move(h));
        }
    } catch (const json::exception& ex) {
        throw FormatError("'" + summary.string() + "': " + ex.what());
    }
    if (fs::exists(dir / "evaluation.json")) out.evaluation = read_evaluation_json(dir / "evaluation.json");
    return out;
}

ExperimentSummary summarize(const ExperimentDir& experiment) {
    if (!experiment.evaluation || experiment.evaluation->runs.empty()) {
        throw DataError("experiment " + experiment_label(experiment.backbone, experiment.augmented) +
                        " has no evaluation");
    }
    std::vector<MetricSet> metrics;
    std::vector<ConfusionMatrix> matrices;
    for (const auto& r : experiment.evaluation->runs) {
        metrics.push_back(metrics_from_confusion(r.confusion));
        matrices.push_back(r.confusion);
    }
    std::vector<FinetuneBoost> boosts;
    try {
        for (const auto& h : experiment.histories) boosts.push_back(finetune_boost(h));
    } catch (const UndefinedBoostError&) {
        boosts.clear();
    }
    ExperimentSummary s;
    s.backbone = experiment.backbone;
    s.augmented = experiment.augmented;
    s.stats = aggregate_runs(metrics, boosts);
    s.confusion = mean_confusion(matrices);
    return s;
}

}  // namespace pavecrack
