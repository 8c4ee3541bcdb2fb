#include <random>
#include <set>

#include <gtest/gtest.h>
#include <opencv2/core.hpp>

#include "pavecrack/augmentation.hpp"
#include "pavecrack/errors.hpp"
#include "synthetic.hpp"

using namespace pavecrack;

namespace {

bool same_pixels(const cv::Mat& a, const cv::Mat& b) {
    return a.size() == b.size() && a.type() == b.type() && cv::countNonZero(a.reshape(1) != b.reshape(1)) == 0;
}

const std::vector<Transform>& all_elements() {
    static const std::vector<Transform> all{{0, false}, {1, false}, {2, false}, {3, false},
                                            {0, true},  {1, true},  {2, true},  {3, true}};
    return all;
}

PatchSample sample(std::mt19937_64& rng, int w, int h, Label label = Label::Positive) {
    PatchSample s;
    s.pixels = pavecrack::testing::random_frame(rng, w, h);
    s.label = label;
    s.source_frame_id = "frame7";
    s.grid_row = 1;
    s.grid_col = 4;
    return s;
}

DatasetManifest small_manifest(std::size_t per_class) {
    std::vector<PatchRef> pos, neg;
    for (std::size_t i = 0; i < per_class; ++i) {
        pos.push_back({"p" + std::to_string(i) + ".png", Label::Positive, "pf" + std::to_string(i), 0, 0, "id"});
        neg.push_back({"n" + std::to_string(i) + ".png", Label::Negative, "nf" + std::to_string(i), 0, 0, "id"});
    }
    ManifestOptions opts;
    opts.seed = 4;
    return build_manifest(pos, neg, opts);
}

}  // namespace

TEST(Transform, NamedTransformsMatchOpenCvReferences) {
    std::mt19937_64 rng(1);
    const cv::Mat img = pavecrack::testing::random_frame(rng, 23, 23);
    cv::Mat ref;
    EXPECT_TRUE(same_pixels(Transform::identity().apply(img), img));
    cv::flip(img, ref, 1);
    EXPECT_TRUE(same_pixels(Transform::hflip().apply(img), ref));
    cv::flip(img, ref, 0);
    EXPECT_TRUE(same_pixels(Transform::vflip().apply(img), ref));
    cv::rotate(img, ref, cv::ROTATE_90_CLOCKWISE);
    EXPECT_TRUE(same_pixels(Transform::rot90().apply(img), ref));
    cv::rotate(img, ref, cv::ROTATE_180);
    EXPECT_TRUE(same_pixels(Transform::rot180().apply(img), ref));
    cv::rotate(img, ref, cv::ROTATE_90_COUNTERCLOCKWISE);
    EXPECT_TRUE(same_pixels(Transform::rot270().apply(img), ref));
    cv::transpose(img, ref);
    EXPECT_TRUE(same_pixels(Transform::parse("transpose").apply(img), ref));
    cv::Mat t;
    cv::transpose(img, t);
    cv::rotate(t, ref, cv::ROTATE_180);
    EXPECT_TRUE(same_pixels(Transform::parse("transverse").apply(img), ref));
}

TEST(Transform, TagsRoundTripAndAreDistinct) {
    std::set<std::string> tags;
    for (const auto& t : all_elements()) {
        EXPECT_EQ(Transform::parse(t.tag()), t);
        tags.insert(t.tag());
    }
    EXPECT_EQ(tags.size(), 8u);
    EXPECT_EQ(Transform::identity().tag(), "id");
    EXPECT_EQ(Transform::parse("hflip+hflip"), Transform::identity());
    EXPECT_EQ(Transform::parse("rot90+rot90+rot90+rot90"), Transform::identity());
    EXPECT_THROW(Transform::parse("shear"), FormatError);
}

TEST(Transform, CompositionMatchesSequentialApplication) {
    std::mt19937_64 rng(2);
    const cv::Mat img = pavecrack::testing::random_frame(rng, 17, 17);
    for (const auto& a : all_elements()) {
        for (const auto& b : all_elements()) {
            EXPECT_TRUE(same_pixels(a.then(b).apply(img), b.apply(a.apply(img)))) << a.tag() << " then " << b.tag();
        }
    }
}

TEST(Transform, FlipsAreInvolutionsAndRotationsHaveOrderFour) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        const int side = std::uniform_int_distribution<int>(1, 64)(rng);
        const cv::Mat img = pavecrack::testing::random_frame(rng, side, side);
        for (const auto& f : {Transform::hflip(), Transform::vflip()}) {
            EXPECT_TRUE(same_pixels(f.apply(f.apply(img)), img));
        }
        cv::Mat r = img;
        for (int k = 0; k < 4; ++k) r = Transform::rot90().apply(r);
        EXPECT_TRUE(same_pixels(r, img));
        EXPECT_TRUE(same_pixels(Transform::rot180().apply(Transform::rot180().apply(img)), img));
    }
}

TEST(TransformSet, IdentityAlwaysPresentAndNoDuplicates) {
    const TransformSet s({Transform::hflip(), Transform::rot90()});
    ASSERT_EQ(s.size(), 3u);
    EXPECT_TRUE(s.transforms().front().is_identity());
    EXPECT_THROW(TransformSet({Transform::hflip(), Transform::hflip()}), DomainError);
    EXPECT_THROW(TransformSet::parse("rot90,rot90"), DomainError);
    EXPECT_EQ(TransformSet::dihedral_default().size(), 6u);
    EXPECT_EQ(TransformSet::parse("hflip,vflip,rot90,rot180,rot270").size(), 6u);
    EXPECT_TRUE(TransformSet::parse("rot90").has_quarter_turn());
    EXPECT_FALSE(TransformSet::parse("hflip,vflip,rot180").has_quarter_turn());
}

TEST(AugmentSample, IdentityOnlyReturnsInputUnchanged) {
    std::mt19937_64 rng(4);
    const auto s = sample(rng, 40, 40);
    const auto out = augment_sample(s, TransformSet({}));
    ASSERT_EQ(out.size(), 1u);
    EXPECT_TRUE(same_pixels(out[0].pixels, s.pixels));
    EXPECT_EQ(out[0].transform_tag, "id");
}

TEST(AugmentSample, PreservesLabelAndSourceForEveryTransform) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Label label = trial % 2 ? Label::Positive : Label::Negative;
        const auto s = sample(rng, 32, 32, label);
        const auto set = TransformSet::dihedral_default();
        const auto out = augment_sample(s, set);
        ASSERT_EQ(out.size(), set.size());
        EXPECT_TRUE(same_pixels(out[0].pixels, s.pixels));
        for (std::size_t i = 0; i < out.size(); ++i) {
            EXPECT_EQ(out[i].label, label);
            EXPECT_EQ(out[i].source_frame_id, s.source_frame_id);
            EXPECT_EQ(out[i].grid_row, s.grid_row);
            EXPECT_EQ(out[i].grid_col, s.grid_col);
            EXPECT_EQ(out[i].transform_tag, set.transforms()[i].tag());
            EXPECT_TRUE(same_pixels(out[i].pixels, set.transforms()[i].apply(s.pixels)));
        }
    }
}

TEST(AugmentSample, ComposesWithExistingTag) {
    std::mt19937_64 rng(6);
    auto s = sample(rng, 16, 16);
    s.pixels = Transform::hflip().apply(s.pixels);
    s.transform_tag = "hflip";
    const auto out = augment_sample(s, TransformSet({Transform::hflip()}));
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[1].transform_tag, "id");
}

TEST(AugmentSample, QuarterTurnsNeedSquarePatches) {
    std::mt19937_64 rng(7);
    const auto s = sample(rng, 30, 20);
    EXPECT_THROW(augment_sample(s, TransformSet::dihedral_default()), GeometryError);
    EXPECT_EQ(augment_sample(s, TransformSet::parse("hflip,vflip,rot180")).size(), 4u);
}

TEST(ExpandDataset, GrowsSelectedSplitsByExactFactor) {
    const auto m = small_manifest(50);
    std::mt19937_64 rng(8);
    const std::vector<std::string> pool{"hflip", "vflip", "rot90", "rot180", "rot270", "transpose", "transverse"};
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Transform> chosen;
        for (const auto& tag : pool) {
            if (std::bernoulli_distribution(0.5)(rng)) chosen.push_back(Transform::parse(tag));
        }
        const TransformSet set(chosen);
        const auto e = expand_dataset(m, set);
        EXPECT_EQ(e.split_count(Split::Train), m.split_count(Split::Train) * set.size());
        EXPECT_EQ(e.split_count(Split::Val), m.split_count(Split::Val));
        EXPECT_EQ(e.split_count(Split::Test), m.split_count(Split::Test));
        EXPECT_EQ(e.positive_count(Split::Train), m.positive_count(Split::Train) * set.size());
        EXPECT_DOUBLE_EQ(e.balance(Split::Train), m.balance(Split::Train));
        EXPECT_TRUE(validate_manifest(e).passed()) << validate_manifest(e).to_text();
    }
}

TEST(ExpandDataset, DefaultTrainSplitScalesBySix) {
    const auto [pos, neg] = pavecrack::testing::survey_refs(7000, 7000, 3);
    ManifestOptions opts;
    opts.seed = 3;
    const auto m = build_manifest(pos, neg, opts);
    const auto e = expand_dataset(m, TransformSet::dihedral_default());
    EXPECT_EQ(e.split_count(Split::Train), 67200u);
    EXPECT_EQ(e.split_count(Split::Val), 1400u);
    EXPECT_EQ(e.split_count(Split::Test), 1400u);
    EXPECT_DOUBLE_EQ(e.balance(Split::Train), 0.5);
}

TEST(ExpandDataset, IdentityOnlyLeavesManifestUnchanged) {
    const auto m = small_manifest(20);
    const auto e = expand_dataset(m, TransformSet({}), {Split::Train, Split::Val, Split::Test});
    EXPECT_EQ(canonical_entries(e), canonical_entries(m));
}

TEST(ExpandDataset, EmptySplitIsCapacityError) {
    auto m = small_manifest(20);
    std::erase_if(m.entries, [](const ManifestEntry& e) { return e.split == Split::Val; });
    EXPECT_THROW(expand_dataset(m, TransformSet::dihedral_default(), {Split::Val}), CapacityError);
    EXPECT_NO_THROW(expand_dataset(m, TransformSet::dihedral_default(), {Split::Train}));
}
