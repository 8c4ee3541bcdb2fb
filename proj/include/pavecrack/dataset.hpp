#pragma once

// Patch tiling, labeled samples and the split manifest.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

namespace pavecrack {

inline constexpr int kSurveyFrameWidth = 2440;
inline constexpr int kSurveyFrameHeight = 1080;
inline constexpr int kDefaultPatchSize = 200;
inline constexpr int kDefaultGridRows = 2;
inline constexpr int kDefaultGridCols = 6;

/// Tiling geometry: rows x cols square patches starting at the origin.
struct GridSpec {
    int patch_size = kDefaultPatchSize;
    int rows = kDefaultGridRows;
    int cols = kDefaultGridCols;
    int origin_x = 0;
    int origin_y = 0;
    int stride_x = kDefaultPatchSize;
    int stride_y = kDefaultPatchSize;

    int count() const { return rows * cols; }
    cv::Rect cell(int row, int col) const {
        return {origin_x + col * stride_x, origin_y + row * stride_y, patch_size, patch_size};
    }
    /// Throws DimensionError naming the axis that does not fit in a frame of this size.
    void check_fits(int frame_width, int frame_height, bool require_disjoint = true) const;

    bool operator==(const GridSpec&) const = default;
};

/// Twelve 200x200 disjoint patches, horizontally centered, in the lower half of the frame.
GridSpec default_grid(int frame_width = kSurveyFrameWidth, int frame_height = kSurveyFrameHeight);

/// Centered grid of the given shape, placed in the lower half of the frame like default_grid.
GridSpec centered_grid(int rows, int cols, int patch_size, int frame_width, int frame_height);

/// Parses "ROWSxCOLS".
std::pair<int, int> parse_grid_shape(std::string_view text);

enum class Label { Negative = 0, Positive = 1, Unlabeled = 2 };

std::string_view label_token(Label label);  // "pos" / "neg" / "unl"
Label parse_label(std::string_view token);

enum class Split { Train = 0, Val = 1, Test = 2 };
inline constexpr Split kAllSplits[] = {Split::Train, Split::Val, Split::Test};

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct PatchSample {
    cv::Mat pixels;  // CV_8UC3, patch_size x patch_size
    Label label = Label::Unlabeled;
    std::string source_frame_id;
    int grid_row = 0;
    int grid_col = 0;
    std::string transform_tag = "id";
};

/// Cuts the grid cells out of an 8-bit 3-channel frame. Pixels are copied, never resampled.
std::vector<PatchSample> extract_patches(const cv::Mat& frame, const GridSpec& grid,
                                         const std::string& frame_id = {});

cv::Mat read_rgb(const std::filesystem::path& path);
void write_rgb(const std::filesystem::path& path, const cv::Mat& rgb);

// ---------------------------------------------------------------------------
// Manifest

/// A labeled patch file. Grid position and frame id are carried through for leakage checks.
struct PatchRef {
    std::string path;
    Label label = Label::Negative;
    std::string source_frame_id;
    int grid_row = 0;
    int grid_col = 0;
    std::string transform_tag = "id";

    /// Identity of the sample: same file under the same transform.
    std::string reference() const { return path + "#" + transform_tag; }
    auto operator<=>(const PatchRef&) const = default;
};

struct ManifestEntry {
    PatchRef ref;
    Split split = Split::Train;
    bool operator==(const ManifestEntry&) const = default;
};

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    double operator[](Split s) const {
        return s == Split::Train ? train : s == Split::Val ? val : test;
    }
};

struct ManifestOptions {
    SplitFractions fractions;
    std::uint64_t seed = 0;
    /// Keep all patches of one source frame inside one split.
    bool frame_level_split = true;
    /// Total samples to place; 0 means 2 * min(|pos|, |neg|).
    std::size_t total = 0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::uint64_t seed = 0;
    bool frame_level_split = true;
    /// Directory that relative entry paths resolve against.
    std::filesystem::path base_dir;

    std::size_t split_count(Split split) const;
    std::size_t positive_count(Split split) const;
    /// Positive fraction of a split; 0 for an empty split.
    double balance(Split split) const;
    std::vector<ManifestEntry> split_entries(Split split) const;
    std::filesystem::path resolve(const PatchRef& ref) const;
};

DatasetManifest build_manifest(std::vector<PatchRef> positives, std::vector<PatchRef> negatives,
                               const ManifestOptions& options);

/// Entries sorted by (split, reference); used to compare manifests independent of shuffle order.
std::vector<ManifestEntry> canonical_entries(const DatasetManifest& manifest);

enum class FindingKind { EmptySplit, Imbalance, Duplicate, Leakage, MissingFile, BadLabel };

struct Finding {
    FindingKind kind;
    std::string message;
};

struct ValidationReport {
    std::size_t counts[3] = {0, 0, 0};
    double balance[3] = {0, 0, 0};
    std::vector<Finding> findings;

    bool passed() const { return findings.empty(); }
    std::size_t count(FindingKind kind) const;
    std::string to_text() const;
};

/// Never throws on invariant violations; they become findings.
ValidationReport validate_manifest(const DatasetManifest& manifest, bool check_files = false);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Random-access view over labeled samples. Training and evaluation consume this.
class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual Label label(std::size_t index) const = 0;
    virtual PatchSample load(std::size_t index) const = 0;
};

/// Samples held in memory.
class MemorySource : public SampleSource {
public:
    MemorySource() = default;
    explicit MemorySource(std::vector<PatchSample> samples) : samples_(std::move(samples)) {}

    void push_back(PatchSample sample) { samples_.push_back(std::move(sample)); }
    std::size_t size() const override { return samples_.size(); }
    Label label(std::size_t index) const override { return samples_.at(index).label; }
    PatchSample load(std::size_t index) const override { return samples_.at(index); }

private:
    std::vector<PatchSample> samples_;
};

/// One split of a manifest, read lazily from disk in manifest order. The transform tag
/// of each entry is applied on load.
class SplitSource : public SampleSource {
public:
    SplitSource(const DatasetManifest& manifest, Split split);

    std::size_t size() const override { return entries_.size(); }
    Label label(std::size_t index) const override { return entries_.at(index).ref.label; }
    PatchSample load(std::size_t index) const override;
    const ManifestEntry& entry(std::size_t index) const { return entries_.at(index); }

    class Iterator {
    public:
        using value_type = PatchSample;
        using difference_type = std::ptrdiff_t;
        Iterator() = default;
        Iterator(const SplitSource* src, std::size_t i) : src_(src), i_(i) {}
        PatchSample operator*() const { return src_->load(i_); }
        Iterator& operator++() { ++i_; return *this; }
        Iterator operator++(int) { auto t = *this; ++i_; return t; }
        bool operator==(const Iterator& o) const { return i_ == o.i_; }

    private:
        const SplitSource* src_ = nullptr;
        std::size_t i_ = 0;
    };
    Iterator begin() const { return {this, 0}; }
    Iterator end() const { return {this, entries_.size()}; }

private:
    std::filesystem::path base_dir_;
    std::vector<ManifestEntry> entries_;
};

/// Deterministic stream over one split, in manifest order. An empty split yields an empty stream;
/// unreadable files surface as IoError when the sample is loaded.
SplitSource load_split(const DatasetManifest& manifest, Split split);

}  // namespace pavecrack
