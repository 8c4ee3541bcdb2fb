#include "pavecrack/dataset.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pavecrack/augmentation.hpp"
#include "pavecrack/errors.hpp"

namespace pavecrack {
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Grid

void GridSpec::check_fits(int frame_width, int frame_height, bool require_disjoint) const {
    if (patch_size <= 0 || rows <= 0 || cols <= 0) {
        throw DimensionError("grid must have positive patch size, rows and cols");
    }
    if (stride_x <= 0 || stride_y <= 0) {
        throw DimensionError("grid strides must be positive");
    }
    if (require_disjoint && (stride_x < patch_size || stride_y < patch_size)) {
        throw DimensionError("grid stride smaller than patch size: patches would overlap");
    }
    if (origin_x < 0 || origin_x + (cols - 1) * stride_x + patch_size > frame_width) {
        throw DimensionError("grid exceeds frame along x (width " + std::to_string(frame_width) +
                             ", needs " + std::to_string(origin_x + (cols - 1) * stride_x + patch_size) + ")");
    }
    if (origin_y < 0 || origin_y + (rows - 1) * stride_y + patch_size > frame_height) {
        throw DimensionError("grid exceeds frame along y (height " + std::to_string(frame_height) +
                             ", needs " + std::to_string(origin_y + (rows - 1) * stride_y + patch_size) + ")");
    }
}

GridSpec centered_grid(int rows, int cols, int patch_size, int frame_width, int frame_height) {
    GridSpec g;
    g.rows = rows;
    g.cols = cols;
    g.patch_size = patch_size;
    g.stride_x = g.stride_y = patch_size;
    g.origin_x = (frame_width - cols * patch_size) / 2;
    // Near field: centre the band in the lower half when it fits there, otherwise in the frame.
    const int band = rows * patch_size;
    const int half = frame_height / 2;
    g.origin_y = band <= frame_height - half ? half + (frame_height - half - band) / 2
                                             : (frame_height - band) / 2;
    return g;
}

GridSpec default_grid(int frame_width, int frame_height) {
    return centered_grid(kDefaultGridRows, kDefaultGridCols, kDefaultPatchSize, frame_width, frame_height);
}

std::pair<int, int> parse_grid_shape(std::string_view text) {
    const auto x = text.find_first_of("xX");
    int rows = 0, cols = 0;
    if (x == std::string_view::npos ||
        std::from_chars(text.data(), text.data() + x, rows).ec != std::errc{} ||
        std::from_chars(text.data() + x + 1, text.data() + text.size(), cols).ec != std::errc{} ||
        rows <= 0 || cols <= 0) {
        throw FormatError("grid must look like ROWSxCOLS, got '" + std::string(text) + "'");
    }
    return {rows, cols};
}

// ---------------------------------------------------------------------------
// Labels and splits

std::string_view label_token(Label label) {
    switch (label) {
        case Label::Positive: return "pos";
        case Label::Negative: return "neg";
        default: return "unl";
    }
}

Label parse_label(std::string_view token) {
    if (token == "pos") return Label::Positive;
    if (token == "neg") return Label::Negative;
    if (token == "unl") return Label::Unlabeled;
    throw FormatError("unknown label '" + std::string(token) + "'");
}

std::string_view split_name(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw FormatError("unknown split '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Patches

std::vector<PatchSample> extract_patches(const cv::Mat& frame, const GridSpec& grid,
                                         const std::string& frame_id) {
    if (frame.type() != CV_8UC3) {
        throw FormatError("frame must be 8-bit 3-channel, got " + std::to_string(frame.channels()) +
                          " channel(s) of depth " + std::to_string(frame.depth()));
    }
    grid.check_fits(frame.cols, frame.rows, /*require_disjoint=*/false);
    std::vector<PatchSample> out;
    out.reserve(static_cast<std::size_t>(grid.count()));
    for (int r = 0; r < grid.rows; ++r) {
        for (int c = 0; c < grid.cols; ++c) {
            PatchSample s;
            s.pixels = frame(grid.cell(r, c)).clone();
            s.label = Label::Unlabeled;
            s.source_frame_id = frame_id;
            s.grid_row = r;
            s.grid_col = c;
            out.push_back(std::move(s));
        }
    }
    return out;
}

cv::Mat read_rgb(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw IoError("cannot read image '" + path.string() + "'");
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

void write_rgb(const fs::path& path, const cv::Mat& rgb) {
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr)) {
        throw IoError("cannot write image '" + path.string() + "'");
    }
}

// ---------------------------------------------------------------------------
// Manifest

std::size_t DatasetManifest::split_count(Split split) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [&](const ManifestEntry& e) { return e.split == split; }));
}

std::size_t DatasetManifest::positive_count(Split split) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) {
        return e.split == split && e.ref.label == Label::Positive;
    }));
}

double DatasetManifest::balance(Split split) const {
    const auto n = split_count(split);
    return n == 0 ? 0.0 : static_cast<double>(positive_count(split)) / static_cast<double>(n);
}

std::vector<ManifestEntry> DatasetManifest::split_entries(Split split) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
        if (e.split == split) out.push_back(e);
    }
    return out;
}

fs::path DatasetManifest::resolve(const PatchRef& ref) const {
    fs::path p(ref.path);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

namespace {

/// Distributes `total` over weights so that the parts sum to `total` exactly.
/// Ties in the fractional remainder go to the lower index.
std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& weights) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> parts(weights.size(), 0);
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = wsum > 0 ? static_cast<double>(total) * weights[i] / wsum : 0.0;
        // Guard against 0.1 * 14000 = 1399.9999999.
        const double fl = std::floor(exact + 1e-9);
        parts[i] = static_cast<std::size_t>(fl);
        assigned += parts[i];
        rema.emplace_back(std::max(0.0, exact - fl), i);
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (std::abs(a.first - b.first) > 1e-9) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t k = 0; assigned < total && k < rema.size(); ++k, ++assigned) {
        parts[rema[k].second] += 1;
    }
    return parts;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(salt)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct FrameGroup {
    std::string key;
    std::vector<PatchRef> members[2];  // indexed by Label (Negative, Positive)
};

}  // namespace

DatasetManifest build_manifest(std::vector<PatchRef> positives, std::vector<PatchRef> negatives,
                               const ManifestOptions& options) {
    const auto& f = options.fractions;
    if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
        throw DomainError("split fractions must be nonnegative and sum to 1");
    }
    for (auto& p : positives) p.label = Label::Positive;
    for (auto& n : negatives) n.label = Label::Negative;

    std::size_t total = options.total;
    if (total == 0) total = 2 * std::min(positives.size(), negatives.size());

    // Split sizes over the whole set, then positives per split so their total is total/2.
    const auto sizes = largest_remainder(total, {f.train, f.val, f.test});
    const std::size_t pos_total = total / 2;
    std::vector<std::size_t> pos_quota =
        largest_remainder(pos_total, {static_cast<double>(sizes[0]), static_cast<double>(sizes[1]),
                                      static_cast<double>(sizes[2])});
    std::size_t quota[2][3];
    for (int s = 0; s < 3; ++s) {
        pos_quota[s] = std::min(pos_quota[s], sizes[s]);
        quota[1][s] = pos_quota[s];
        quota[0][s] = sizes[s] - pos_quota[s];
    }
    const std::size_t need_pos = quota[1][0] + quota[1][1] + quota[1][2];
    const std::size_t need_neg = quota[0][0] + quota[0][1] + quota[0][2];
    if (positives.size() < need_pos || negatives.size() < need_neg) {
        std::ostringstream msg;
        msg << "insufficient samples: need " << need_pos << " positive and " << need_neg
            << " negative, have " << positives.size() << " and " << negatives.size();
        if (positives.size() < need_pos) msg << " (positive shortfall " << need_pos - positives.size() << ")";
        if (negatives.size() < need_neg) msg << " (negative shortfall " << need_neg - negatives.size() << ")";
        throw CapacityError(msg.str());
    }

    // Canonical order first so the result depends only on the input multisets.
    std::sort(positives.begin(), positives.end());
    std::sort(negatives.begin(), negatives.end());

    std::map<std::string, FrameGroup> by_key;
    auto add = [&](const PatchRef& r) {
        const std::string key = options.frame_level_split && !r.source_frame_id.empty()
                                    ? "frame:" + r.source_frame_id
                                    : "ref:" + r.reference();
        auto& g = by_key[key];
        g.key = key;
        g.members[static_cast<int>(r.label)].push_back(r);
    };
    for (const auto& r : positives) add(r);
    for (const auto& r : negatives) add(r);

    std::vector<FrameGroup> groups;
    groups.reserve(by_key.size());
    for (auto& [k, g] : by_key) groups.push_back(std::move(g));
    std::mt19937_64 rng(mix_seed(options.seed, 1));
    std::shuffle(groups.begin(), groups.end(), rng);

    std::vector<ManifestEntry> placed[3];
    std::vector<bool> used(groups.size(), false);
    auto place = [&](std::size_t gi, int s) {
        used[gi] = true;
        for (int c = 0; c < 2; ++c) {
            for (const auto& r : groups[gi].members[c]) placed[s].push_back({r, static_cast<Split>(s)});
        }
    };

    std::size_t largest[2] = {0, 0};
    for (const auto& g : groups) {
        for (int c = 0; c < 2; ++c) largest[c] = std::max(largest[c], g.members[c].size());
    }

    // Smallest quota first, so the largest split takes whatever is left over.
    int order[3] = {0, 1, 2};
    std::stable_sort(order, order + 3, [&](int a, int b) { return sizes[a] < sizes[b]; });

    std::ostringstream shortfall;
    for (const int s : order) {
        std::size_t gap[2] = {quota[0][s], quota[1][s]};
        // Whole frames in seeded order while the gap stays comfortably large.
        const std::size_t reserve[2] = {3 * largest[0], 3 * largest[1]};
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            if (used[gi]) continue;
            const std::size_t n0 = groups[gi].members[0].size(), n1 = groups[gi].members[1].size();
            const bool exact = n0 == gap[0] && n1 == gap[1];
            if (exact || (n0 + reserve[0] <= gap[0] && n1 + reserve[1] <= gap[1])) {
                place(gi, s);
                gap[0] -= n0;
                gap[1] -= n1;
            }
            if (gap[0] == 0 && gap[1] == 0) break;
        }
        if (gap[0] == 0 && gap[1] == 0) continue;

        // Exact completion: 0/1 subset sum over the unused frames in two dimensions.
        const std::size_t w = gap[1] + 1;
        const std::size_t states = (gap[0] + 1) * w;
        std::vector<std::int64_t> via(states, -1);
        via[0] = static_cast<std::int64_t>(groups.size());
        for (std::size_t gi = 0; gi < groups.size() && via[states - 1] < 0; ++gi) {
            if (used[gi]) continue;
            const std::size_t n0 = groups[gi].members[0].size(), n1 = groups[gi].members[1].size();
            if (n0 > gap[0] || n1 > gap[1] || n0 + n1 == 0) continue;
            for (std::size_t a = gap[0] + 1; a-- > n0;) {
                for (std::size_t b = gap[1] + 1; b-- > n1;) {
                    if (via[a * w + b] < 0 && via[(a - n0) * w + (b - n1)] >= 0 &&
                        via[(a - n0) * w + (b - n1)] != static_cast<std::int64_t>(gi)) {
                        via[a * w + b] = static_cast<std::int64_t>(gi);
                    }
                }
            }
        }
        if (via[states - 1] < 0) {
            shortfall << " " << split_name(static_cast<Split>(s)) << " short by " << gap[1] << " pos/" << gap[0]
                      << " neg;";
            continue;
        }
        std::size_t a = gap[0], b = gap[1];
        while (a != 0 || b != 0) {
            const auto gi = static_cast<std::size_t>(via[a * w + b]);
            place(gi, s);
            a -= groups[gi].members[0].size();
            b -= groups[gi].members[1].size();
        }
    }
    if (!shortfall.str().empty()) {
        throw CapacityError("frame-level split could not fill quotas:" + shortfall.str() +
                            " add samples or disable frame-level splitting");
    }

    DatasetManifest m;
    m.seed = options.seed;
    m.frame_level_split = options.frame_level_split;
    for (int s = 0; s < 3; ++s) {
        std::mt19937_64 order_rng(mix_seed(options.seed, 100 + static_cast<std::uint64_t>(s)));
        std::sort(placed[s].begin(), placed[s].end(),
                  [](const ManifestEntry& a, const ManifestEntry& b) { return a.ref < b.ref; });
        std::shuffle(placed[s].begin(), placed[s].end(), order_rng);
        m.entries.insert(m.entries.end(), placed[s].begin(), placed[s].end());
    }
    return m;
}

std::vector<ManifestEntry> canonical_entries(const DatasetManifest& manifest) {
    auto out = manifest.entries;
    std::sort(out.begin(), out.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
        if (a.split != b.split) return a.split < b.split;
        return a.ref < b.ref;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Validation

std::size_t ValidationReport::count(FindingKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(findings.begin(), findings.end(), [&](const Finding& f) { return f.kind == kind; }));
}

std::string ValidationReport::to_text() const {
    std::ostringstream out;
    out << "status: " << (passed() ? "pass" : "fail") << "\n";
    for (Split s : kAllSplits) {
        const int i = static_cast<int>(s);
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4f", balance[i]);
        out << split_name(s) << ": " << counts[i] << " samples, positive fraction " << buf << "\n";
    }
    out << "total: " << counts[0] + counts[1] + counts[2] << "\n";
    for (const auto& f : findings) out << "finding: " << f.message << "\n";
    return out.str();
}

ValidationReport validate_manifest(const DatasetManifest& manifest, bool check_files) {
    ValidationReport report;
    for (Split s : kAllSplits) {
        const int i = static_cast<int>(s);
        report.counts[i] = manifest.split_count(s);
        report.balance[i] = manifest.balance(s);
        if (report.counts[i] == 0) {
            report.findings.push_back({FindingKind::EmptySplit, "empty split '" + std::string(split_name(s)) + "'"});
            continue;
        }
        const double tol = 1.0 / static_cast<double>(report.counts[i]);
        if (std::abs(report.balance[i] - 0.5) > tol + 1e-12) {
            report.findings.push_back({FindingKind::Imbalance, "split '" + std::string(split_name(s)) +
                                                                   "' positive fraction " +
                                                                   std::to_string(report.balance[i]) +
                                                                   " is not balanced"});
        }
    }

    std::map<std::string, std::set<Split>> seen;
    std::map<std::pair<std::string, Split>, int> per_split;
    for (const auto& e : manifest.entries) {
        if (e.ref.label == Label::Unlabeled) {
            report.findings.push_back({FindingKind::BadLabel, "unlabeled entry '" + e.ref.path + "'"});
        }
        const auto ref = e.ref.reference();
        seen[ref].insert(e.split);
        per_split[{ref, e.split}] += 1;
    }
    for (const auto& [key, n] : per_split) {
        if (n > 1) {
            report.findings.push_back({FindingKind::Duplicate, "duplicate reference '" + key.first + "' appears " +
                                                                   std::to_string(n) + " times in split '" +
                                                                   std::string(split_name(key.second)) + "'"});
        }
    }
    for (const auto& [ref, splits] : seen) {
        if (splits.size() > 1) {
            std::string names;
            for (Split s : splits) names += (names.empty() ? "" : ",") + std::string(split_name(s));
            report.findings.push_back({FindingKind::Leakage, "leakage: reference '" + ref +
                                                                 "' appears in splits " + names});
        }
    }
    if (check_files) {
        std::set<std::string> checked;
        for (const auto& e : manifest.entries) {
            if (!checked.insert(e.ref.path).second) continue;
            const auto p = manifest.resolve(e.ref);
            if (!fs::exists(p)) {
                report.findings.push_back({FindingKind::MissingFile, "missing file '" + p.string() + "'"});
            }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {
constexpr std::string_view kManifestMagic = "#pavecrack-manifest v1";

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto t = line.find('\t', pos);
        out.push_back(line.substr(pos, t == std::string::npos ? std::string::npos : t - pos));
        if (t == std::string::npos) break;
        pos = t + 1;
    }
    return out;
}
}  // namespace

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
    out << kManifestMagic << "\tseed=" << manifest.seed << "\tframe_split=" << (manifest.frame_level_split ? 1 : 0)
        << "\n";
    out << "#path\tlabel\tsplit\tsource_frame_id\tgrid_row\tgrid_col\ttransform_tag\n";
    for (const auto& e : manifest.entries) {
        out << e.ref.path << '\t' << label_token(e.ref.label) << '\t' << split_name(e.split) << '\t'
            << e.ref.source_frame_id << '\t' << e.ref.grid_row << '\t' << e.ref.grid_col << '\t'
            << e.ref.transform_tag << '\n';
    }
    if (!out) throw IoError("failed writing manifest '" + path.string() + "'");
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest '" + path.string() + "'");
    DatasetManifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::string line;
    if (!std::getline(in, line) || line.rfind(kManifestMagic, 0) != 0) {
        throw FormatError("'" + path.string() + "' is not a pavecrack v1 manifest");
    }
    for (const auto& field : split_tabs(line)) {
        if (field.rfind("seed=", 0) == 0) m.seed = std::stoull(field.substr(5));
        if (field.rfind("frame_split=", 0) == 0) m.frame_level_split = field.substr(12) != "0";
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto f = split_tabs(line);
        if (f.size() != 7) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": expected 7 fields, got " +
                              std::to_string(f.size()));
        }
        ManifestEntry e;
        e.ref.path = f[0];
        e.ref.label = parse_label(f[1]);
        e.split = parse_split(f[2]);
        e.ref.source_frame_id = f[3];
        try {
            e.ref.grid_row = std::stoi(f[4]);
            e.ref.grid_col = std::stoi(f[5]);
        } catch (const std::exception&) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": bad grid position");
        }
        e.ref.transform_tag = Transform::parse(f[6]).tag();
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Streams

SplitSource::SplitSource(const DatasetManifest& manifest, Split split)
    : base_dir_(manifest.base_dir), entries_(manifest.split_entries(split)) {}

PatchSample SplitSource::load(std::size_t index) const {
    const auto& e = entries_.at(index);
    fs::path p(e.ref.path);
    if (!p.is_absolute() && !base_dir_.empty()) p = base_dir_ / p;
    PatchSample s;
    s.pixels = read_rgb(p);
    const Transform t = Transform::parse(e.ref.transform_tag);
    if (!t.is_identity()) s.pixels = t.apply(s.pixels);
    s.label = e.ref.label;
    s.source_frame_id = e.ref.source_frame_id;
    s.grid_row = e.ref.grid_row;
    s.grid_col = e.ref.grid_col;
    s.transform_tag = t.tag();
    return s;
}

SplitSource load_split(const DatasetManifest& manifest, Split split) {
    return SplitSource(manifest, split);
}

}  // namespace pavecrack
