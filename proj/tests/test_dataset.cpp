#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>

#include "pavecrack/dataset.hpp"
#include "pavecrack/errors.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace pavecrack;
using pavecrack::testing::TempDir;

namespace {

std::vector<PatchRef> make_refs(Label label, std::size_t n, std::size_t per_frame, const std::string& prefix) {
    std::vector<PatchRef> out;
    for (std::size_t i = 0; i < n; ++i) {
        PatchRef r;
        r.path = prefix + std::to_string(i) + ".png";
        r.label = label;
        r.source_frame_id = prefix + "frame" + std::to_string(i / per_frame);
        r.grid_row = static_cast<int>(i % per_frame) / 6;
        r.grid_col = static_cast<int>(i % per_frame) % 6;
        out.push_back(r);
    }
    return out;
}

bool same_pixels(const cv::Mat& a, const cv::Mat& b) {
    return a.size() == b.size() && a.type() == b.type() && cv::countNonZero(a.reshape(1) != b.reshape(1)) == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tiling

TEST(Tiling, DefaultGridGivesTwelvePatchesOfTwoHundred) {
    std::mt19937_64 rng(1);
    const cv::Mat frame = pavecrack::testing::random_frame(rng, kSurveyFrameWidth, kSurveyFrameHeight);
    const GridSpec grid = default_grid();
    EXPECT_EQ(grid.rows, 2);
    EXPECT_EQ(grid.cols, 6);
    EXPECT_EQ(grid.origin_x, 620);
    EXPECT_GE(grid.origin_y, kSurveyFrameHeight / 2);
    const auto patches = extract_patches(frame, grid, "f");
    ASSERT_EQ(patches.size(), 12u);
    for (const auto& p : patches) {
        EXPECT_EQ(p.pixels.rows, 200);
        EXPECT_EQ(p.pixels.cols, 200);
        EXPECT_EQ(p.pixels.type(), CV_8UC3);
        EXPECT_EQ(p.label, Label::Unlabeled);
        EXPECT_EQ(p.source_frame_id, "f");
        EXPECT_EQ(p.transform_tag, "id");
    }
}

TEST(Tiling, SingleCellOfSameSizeFrameIsIdentity) {
    std::mt19937_64 rng(2);
    const cv::Mat frame = pavecrack::testing::random_frame(rng, 200, 200);
    GridSpec g;
    g.rows = g.cols = 1;
    const auto patches = extract_patches(frame, g);
    ASSERT_EQ(patches.size(), 1u);
    EXPECT_TRUE(same_pixels(patches[0].pixels, frame));
}

TEST(Tiling, TwoByTwoReassemblesFrame) {
    std::mt19937_64 rng(3);
    const cv::Mat frame = pavecrack::testing::random_frame(rng, 400, 400);
    GridSpec g;
    g.rows = g.cols = 2;
    const auto patches = extract_patches(frame, g);
    ASSERT_EQ(patches.size(), 4u);
    cv::Mat rebuilt(400, 400, CV_8UC3, cv::Scalar::all(0));
    for (const auto& p : patches) {
        for (int y = 0; y < 200; ++y)
            for (int x = 0; x < 200; ++x)
                rebuilt.at<cv::Vec3b>(p.grid_row * 200 + y, p.grid_col * 200 + x) = p.pixels.at<cv::Vec3b>(y, x);
    }
    EXPECT_TRUE(same_pixels(rebuilt, frame));
}

TEST(Tiling, PixelsMatchDirectIndexingOverRandomGrids) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 60; ++trial) {
        const int patch = std::uniform_int_distribution<int>(8, 40)(rng);
        GridSpec g;
        g.patch_size = patch;
        g.rows = std::uniform_int_distribution<int>(1, 4)(rng);
        g.cols = std::uniform_int_distribution<int>(1, 5)(rng);
        g.stride_x = patch + std::uniform_int_distribution<int>(0, 6)(rng);
        g.stride_y = patch + std::uniform_int_distribution<int>(0, 6)(rng);
        g.origin_x = std::uniform_int_distribution<int>(0, 10)(rng);
        g.origin_y = std::uniform_int_distribution<int>(0, 10)(rng);
        const int w = g.origin_x + (g.cols - 1) * g.stride_x + patch + std::uniform_int_distribution<int>(0, 9)(rng);
        const int h = g.origin_y + (g.rows - 1) * g.stride_y + patch + std::uniform_int_distribution<int>(0, 9)(rng);
        const cv::Mat frame = pavecrack::testing::random_frame(rng, w, h);
        const auto patches = extract_patches(frame, g);
        ASSERT_EQ(static_cast<int>(patches.size()), g.rows * g.cols);
        std::set<std::pair<int, int>> covered;
        for (const auto& p : patches) {
            ASSERT_LT(p.grid_row, g.rows);
            ASSERT_LT(p.grid_col, g.cols);
            for (int y = 0; y < patch; ++y) {
                for (int x = 0; x < patch; ++x) {
                    const int fx = g.origin_x + p.grid_col * g.stride_x + x;
                    const int fy = g.origin_y + p.grid_row * g.stride_y + y;
                    ASSERT_EQ(p.pixels.at<cv::Vec3b>(y, x), frame.at<cv::Vec3b>(fy, fx));
                    ASSERT_TRUE(covered.insert({fx, fy}).second) << "pixel shared by two patches";
                }
            }
        }
    }
}

TEST(Tiling, OutOfBoundsNamesAxis) {
    const cv::Mat frame(300, 1000, CV_8UC3, cv::Scalar::all(0));
    GridSpec g;
    g.rows = 1;
    g.cols = 6;
    try {
        extract_patches(frame, g);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("along x"), std::string::npos);
    }
    g.cols = 1;
    g.rows = 2;
    try {
        extract_patches(frame, g);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("along y"), std::string::npos);
    }
}

TEST(Tiling, RejectsNonThreeChannelFrames) {
    const cv::Mat gray(400, 400, CV_8UC1, cv::Scalar::all(0));
    GridSpec g;
    g.rows = g.cols = 1;
    EXPECT_THROW(extract_patches(gray, g), FormatError);
}

TEST(Tiling, OverlappingStrideRejectedWhenDisjointRequired) {
    GridSpec g;
    g.rows = 1;
    g.cols = 2;
    g.stride_x = 150;
    EXPECT_THROW(g.check_fits(1000, 1000, true), DimensionError);
    EXPECT_NO_THROW(g.check_fits(1000, 1000, false));
}

TEST(Tiling, GridShapeParsing) {
    EXPECT_EQ(parse_grid_shape("2x6"), std::make_pair(2, 6));
    EXPECT_EQ(parse_grid_shape("3X4"), std::make_pair(3, 4));
    EXPECT_ANY_THROW(parse_grid_shape("2by6"));
    EXPECT_ANY_THROW(parse_grid_shape("0x6"));
    EXPECT_EQ(centered_grid(2, 6, 200, kSurveyFrameWidth, kSurveyFrameHeight), default_grid());
}

TEST(Tiling, RgbFileRoundTrip) {
    TempDir dir;
    std::mt19937_64 rng(5);
    const cv::Mat img = pavecrack::testing::random_frame(rng, 31, 17);
    write_rgb(dir / "a.png", img);
    EXPECT_TRUE(same_pixels(read_rgb(dir / "a.png"), img));
    EXPECT_THROW(read_rgb(dir / "missing.png"), IoError);
}

// ---------------------------------------------------------------------------
// Manifest

TEST(Manifest, PublishedSplitSizesAndBalance) {
    ManifestOptions opts;
    opts.seed = 11;
    const auto [pos, neg] = pavecrack::testing::survey_refs(7000, 7000, 11);
    const auto m = build_manifest(pos, neg, opts);
    EXPECT_EQ(m.split_count(Split::Train), 11200u);
    EXPECT_EQ(m.split_count(Split::Val), 1400u);
    EXPECT_EQ(m.split_count(Split::Test), 1400u);
    for (Split s : kAllSplits) {
        EXPECT_EQ(m.positive_count(s) * 2, m.split_count(s));
        EXPECT_DOUBLE_EQ(m.balance(s), 0.5);
    }
    EXPECT_TRUE(validate_manifest(m).passed()) << validate_manifest(m).to_text();
    std::map<std::string, std::set<Split>> splits_of;
    for (const auto& e : m.entries) splits_of[e.ref.source_frame_id].insert(e.split);
    for (const auto& [frame, splits] : splits_of) EXPECT_EQ(splits.size(), 1u) << frame;
}

TEST(Manifest, SmallestBalancedCase) {
    ManifestOptions opts;
    opts.fractions = {0.5, 0.25, 0.25};
    opts.frame_level_split = false;
    const auto m = build_manifest(make_refs(Label::Positive, 2, 1, "p"), make_refs(Label::Negative, 2, 1, "n"), opts);
    EXPECT_EQ(m.split_count(Split::Train), 2u);
    EXPECT_EQ(m.split_count(Split::Val), 1u);
    EXPECT_EQ(m.split_count(Split::Test), 1u);
    EXPECT_EQ(m.positive_count(Split::Train), 1u);
    EXPECT_EQ(m.positive_count(Split::Val) + m.positive_count(Split::Test), 1u);
}

TEST(Manifest, DeterministicUnderInputPermutation) {
    auto pos = make_refs(Label::Positive, 240, 4, "p");
    auto neg = make_refs(Label::Negative, 240, 4, "n");
    ManifestOptions opts;
    opts.seed = 99;
    const auto a = build_manifest(pos, neg, opts);
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        std::shuffle(pos.begin(), pos.end(), rng);
        std::shuffle(neg.begin(), neg.end(), rng);
        const auto b = build_manifest(pos, neg, opts);
        EXPECT_EQ(canonical_entries(a), canonical_entries(b));
        EXPECT_EQ(a.entries, b.entries);
    }
    opts.seed = 100;
    EXPECT_NE(build_manifest(pos, neg, opts).entries, a.entries);
}

TEST(Manifest, FrameLevelSplitKeepsFramesTogether) {
    // Frames mix labels, as real survey frames do.
    std::vector<PatchRef> pos, neg;
    for (int f = 0; f < 100; ++f) {
        for (int k = 0; k < 12; ++k) {
            PatchRef r;
            r.path = "f" + std::to_string(f) + "_" + std::to_string(k) + ".png";
            r.source_frame_id = "f" + std::to_string(f);
            r.grid_row = k / 6;
            r.grid_col = k % 6;
            (k % 2 == 0 ? pos : neg).push_back(r);
        }
    }
    ManifestOptions opts;
    opts.seed = 3;
    const auto m = build_manifest(pos, neg, opts);
    std::map<std::string, std::set<Split>> splits_of;
    for (const auto& e : m.entries) splits_of[e.ref.source_frame_id].insert(e.split);
    for (const auto& [frame, splits] : splits_of) EXPECT_EQ(splits.size(), 1u) << frame;
    EXPECT_TRUE(validate_manifest(m).passed()) << validate_manifest(m).to_text();
}

TEST(Manifest, InsufficientSamplesIsCapacityError) {
    ManifestOptions opts;
    opts.total = 100;
    EXPECT_THROW(build_manifest(make_refs(Label::Positive, 10, 1, "p"), make_refs(Label::Negative, 90, 1, "n"), opts),
                 CapacityError);
    opts.fractions = {0.5, 0.5, 0.5};
    EXPECT_THROW(build_manifest(make_refs(Label::Positive, 10, 1, "p"), make_refs(Label::Negative, 10, 1, "n"), opts),
                 DomainError);
}

TEST(Manifest, BalanceWithinOneOverSizeForEvenInputs) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(3, 200)(rng);
        double tr = std::uniform_real_distribution<double>(0.2, 0.8)(rng);
        double va = std::uniform_real_distribution<double>(0.05, 1.0 - tr - 0.05)(rng);
        ManifestOptions opts;
        opts.fractions = {tr, va, 1.0 - tr - va};
        opts.seed = rng();
        opts.frame_level_split = false;
        const auto m = build_manifest(make_refs(Label::Positive, n, 1, "p"), make_refs(Label::Negative, n, 1, "n"),
                                      opts);
        EXPECT_EQ(m.entries.size(), 2 * n);
        for (Split s : kAllSplits) {
            const auto size = m.split_count(s);
            if (size == 0) continue;
            EXPECT_LE(std::abs(m.balance(s) - 0.5), 1.0 / static_cast<double>(size) + 1e-12);
        }
    }
}

TEST(Manifest, ValidationFindings) {
    DatasetManifest empty;
    const auto r = validate_manifest(empty);
    EXPECT_FALSE(r.passed());
    EXPECT_EQ(r.count(FindingKind::EmptySplit), 3u);

    ManifestOptions opts;
    opts.frame_level_split = false;
    auto m = build_manifest(make_refs(Label::Positive, 20, 1, "p"), make_refs(Label::Negative, 20, 1, "n"), opts);
    ASSERT_TRUE(validate_manifest(m).passed());

    auto leaked = m;
    const auto it = std::find_if(leaked.entries.begin(), leaked.entries.end(),
                                 [](const ManifestEntry& e) { return e.split == Split::Train; });
    ManifestEntry copy = *it;
    copy.split = Split::Test;
    leaked.entries.push_back(copy);
    const auto lr = validate_manifest(leaked);
    EXPECT_FALSE(lr.passed());
    ASSERT_GE(lr.count(FindingKind::Leakage), 1u);
    bool named = false;
    for (const auto& f : lr.findings) {
        if (f.kind == FindingKind::Leakage && f.message.find(copy.ref.path) != std::string::npos) named = true;
    }
    EXPECT_TRUE(named);

    auto dup = m;
    dup.entries.push_back(dup.entries.front());
    EXPECT_GE(validate_manifest(dup).count(FindingKind::Duplicate), 1u);

    auto skewed = m;
    for (auto& e : skewed.entries) {
        if (e.split == Split::Train && e.ref.label == Label::Negative) e.ref.label = Label::Positive;
    }
    EXPECT_GE(validate_manifest(skewed).count(FindingKind::Imbalance), 1u);
}

TEST(Manifest, FileRoundTripAndResolution) {
    TempDir dir;
    ManifestOptions opts;
    opts.seed = 5;
    auto m = build_manifest(make_refs(Label::Positive, 30, 3, "p"), make_refs(Label::Negative, 30, 3, "n"), opts);
    m.entries[0].ref.transform_tag = "rot90";
    write_manifest(m, dir / "sub" / "m.tsv");
    const auto back = read_manifest(dir / "sub" / "m.tsv");
    EXPECT_EQ(back.entries, m.entries);
    EXPECT_EQ(back.seed, 5u);
    EXPECT_TRUE(back.frame_level_split);
    EXPECT_EQ(back.resolve(back.entries[1].ref), dir / "sub" / back.entries[1].ref.path);

    std::ifstream in(dir / "sub" / "m.tsv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header.rfind("#pavecrack-manifest v1", 0), 0u);

    std::ofstream bad(dir / "bad.tsv");
    bad << "not a manifest\n";
    bad.close();
    EXPECT_THROW(read_manifest(dir / "bad.tsv"), FormatError);
}

TEST(Manifest, MissingFilesReported) {
    TempDir dir;
    ManifestOptions opts;
    opts.frame_level_split = false;
    auto m = build_manifest(make_refs(Label::Positive, 4, 1, "p"), make_refs(Label::Negative, 4, 1, "n"), opts);
    m.base_dir = dir.path();
    EXPECT_EQ(validate_manifest(m, true).count(FindingKind::MissingFile), 8u);
}

// ---------------------------------------------------------------------------
// Loading splits

namespace {

DatasetManifest manifest_on_disk(const TempDir& dir, std::size_t per_class) {
    std::mt19937_64 rng(17);
    std::vector<PatchRef> pos, neg;
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
        const bool positive = i % 2 == 0;
        const std::string name = (positive ? "pos" : "neg") + std::to_string(i) + ".png";
        write_rgb(dir / name, positive ? pavecrack::testing::crack_patch(rng, 32) : pavecrack::testing::texture_patch(rng, 32));
        PatchRef r;
        r.path = name;
        r.source_frame_id = "frame" + std::to_string(i);
        (positive ? pos : neg).push_back(r);
    }
    ManifestOptions opts;
    opts.seed = 2;
    auto m = build_manifest(pos, neg, opts);
    write_manifest(m, dir / "manifest.tsv");
    return read_manifest(dir / "manifest.tsv");
}

}  // namespace

TEST(LoadSplit, YieldsEverySplitEntryOnceInStableOrder) {
    TempDir dir;
    const auto m = manifest_on_disk(dir, 20);
    std::multiset<std::string> seen;
    for (Split s : kAllSplits) {
        const auto a = load_split(m, s);
        const auto b = load_split(m, s);
        ASSERT_EQ(a.size(), m.split_count(s));
        std::size_t positives = 0;
        auto it = b.begin();
        for (const PatchSample& sample : a) {
            const PatchSample other = *it++;
            EXPECT_TRUE(same_pixels(sample.pixels, other.pixels));
            EXPECT_EQ(sample.label, other.label);
            if (sample.label == Label::Positive) ++positives;
        }
        for (std::size_t i = 0; i < a.size(); ++i) seen.insert(a.entry(i).ref.reference());
        EXPECT_EQ(positives, m.positive_count(s));
    }
    std::multiset<std::string> expected;
    for (const auto& e : m.entries) expected.insert(e.ref.reference());
    EXPECT_EQ(seen, expected);
}

TEST(LoadSplit, AppliesTransformTagOnLoad) {
    TempDir dir;
    auto m = manifest_on_disk(dir, 4);
    const auto plain = load_split(m, Split::Train).load(0);
    for (auto& e : m.entries) e.ref.transform_tag = "hflip";
    const auto flipped = load_split(m, Split::Train).load(0);
    cv::Mat expected;
    cv::flip(plain.pixels, expected, 1);
    EXPECT_TRUE(same_pixels(flipped.pixels, expected));
    EXPECT_EQ(flipped.transform_tag, "hflip");
}

TEST(LoadSplit, UnreadableFileNamesPath) {
    TempDir dir;
    auto m = manifest_on_disk(dir, 4);
    const auto src = load_split(m, Split::Test);
    std::filesystem::remove(m.resolve(src.entry(0).ref));
    try {
        src.load(0);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find(src.entry(0).ref.path), std::string::npos);
    }
}
