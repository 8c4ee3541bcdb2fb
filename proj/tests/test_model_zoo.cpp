#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "pavecrack/errors.hpp"
#include "pavecrack/model_zoo.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

using namespace pavecrack;
namespace fs = std::filesystem;
using pavecrack::testing::TempDir;

namespace {

ClassifierModel tiny_model(std::uint64_t head_seed = 1) {
    const auto spec = tiny_backbone_spec();
    return instantiate(spec, SyntheticProvider(tiny_backbone_layout(), 5), head_seed);
}

/// Backbone archive holding the tiny layout under a custom name, plus a matching lockfile.
BackboneSpec write_tiny_cache(const fs::path& dir) {
    BackboneSpec spec = tiny_backbone_spec();
    spec.name = "TinyArchive";
    spec.pretrained_source = "tiny_archive.pcw";
    const Backbone b = SyntheticProvider(tiny_backbone_layout(), 9).load(spec);
    WeightsArchive a;
    a.backbone = spec.name;
    a.input_side = spec.native_input_side;
    a.preprocessing = spec.preprocessing;
    for (const auto& u : b.units) {
        a.units.push_back(u.config());
        for (const auto* p : u.parameters()) a.tensors.emplace_back(p->name, p->value);
        for (const auto* p : u.buffers()) a.tensors.emplace_back(p->name, p->value);
    }
    write_archive(a, dir / spec.pretrained_source);
    write_lockfile({{spec.name, "https://example.invalid/tiny", sha256_file(dir / spec.pretrained_source)}},
                   dir / "weights.lock");
    return spec;
}

}  // namespace

TEST(Registry, SixBackbonesWithStableNamesAndFraction) {
    const auto all = list_backbones();
    ASSERT_EQ(all.size(), 6u);
    const std::vector<std::string> names{"EfficientNetB7", "InceptionV3", "Xception",
                                         "MobileNetV2",    "ResNet",      "VGG16"};
    std::set<std::string> sources;
    for (std::size_t i = 0; i < all.size(); ++i) {
        EXPECT_EQ(all[i].name, names[i]);
        EXPECT_DOUBLE_EQ(all[i].unfreeze_fraction, 0.25);
        EXPECT_GT(all[i].layer_count, 0);
        EXPECT_GT(all[i].native_input_side, 0);
        sources.insert(all[i].pretrained_source);
        EXPECT_EQ(find_backbone(all[i].name), all[i]);
    }
    EXPECT_EQ(sources.size(), 6u);
    EXPECT_EQ(find_backbone("VGG16").layer_count, static_cast<int>(vgg16_layout().size()));
    EXPECT_EQ(find_backbone("TinyNet").layer_count, static_cast<int>(tiny_backbone_layout().size()));
    EXPECT_THROW(find_backbone("AlexNet"), DomainError);
}

TEST(Trainability, NewModelHasFrozenBackbone) {
    const auto m = tiny_model();
    EXPECT_EQ(m.trainable_unit_count(), 0);
    EXPECT_EQ(m.trainable_parameter_count(), m.head().parameter_count());
    EXPECT_EQ(m.head().parameter_count(), 33u);
}

TEST(Trainability, UnfreezeTopUsesCeilingOfFraction) {
    auto m = tiny_model();
    const std::vector<std::pair<double, int>> cases{{0.0, 0}, {0.1, 1}, {0.25, 1}, {0.26, 2},
                                                    {0.5, 2}, {0.75, 3}, {0.76, 4}, {1.0, 4}};
    for (const auto& [fraction, units] : cases) {
        m.unfreeze_top(fraction);
        EXPECT_EQ(m.trainable_unit_count(), units) << fraction;
        for (int i = 0; i < m.layer_count(); ++i) EXPECT_EQ(m.unit_trainable(i), i >= 4 - units);
    }
    EXPECT_THROW(m.unfreeze_top(-0.1), DomainError);
    EXPECT_THROW(m.unfreeze_top(1.5), DomainError);
    EXPECT_THROW(m.unfreeze_top(std::nan("")), DomainError);
}

TEST(Trainability, CountsAgreeWithParameterWalkAndGrowMonotonically) {
    auto m = tiny_model();
    std::mt19937_64 rng(3);
    std::vector<double> fractions{0.0, 1.0};
    for (int i = 0; i < 30; ++i) fractions.push_back(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    std::sort(fractions.begin(), fractions.end());
    std::size_t previous = 0;
    for (const double f : fractions) {
        m.unfreeze_top(f);
        std::size_t trainable = 0, total = 0;
        m.visit_parameters([&](const std::string&, const nn::Parameter& p, bool t) {
            total += p.size();
            if (t) trainable += p.size();
        });
        EXPECT_EQ(trainable, m.trainable_parameter_count());
        EXPECT_EQ(total, m.total_parameter_count());
        EXPECT_GE(trainable, previous);
        previous = trainable;
    }
    EXPECT_EQ(previous, m.total_parameter_count());
}

TEST(Trainability, FreeFunctionReturnsAdjustedCopy) {
    const auto m = tiny_model();
    const auto u = unfreeze_top(m, 0.25);
    EXPECT_EQ(m.trainable_unit_count(), 0);
    EXPECT_EQ(u.trainable_unit_count(), 1);
}

TEST(Instantiate, HeadSeedDeterminesHead) {
    const auto a = tiny_model(7), b = tiny_model(7), c = tiny_model(8);
    EXPECT_EQ(a.head().parameters()[0]->value, b.head().parameters()[0]->value);
    EXPECT_NE(a.head().parameters()[0]->value, c.head().parameters()[0]->value);
}

TEST(Instantiate, LayerCountMismatchIsIntegrityError) {
    auto spec = tiny_backbone_spec();
    spec.layer_count = 5;
    EXPECT_THROW(instantiate(spec, SyntheticProvider(tiny_backbone_layout(), 1), 0), IntegrityError);
    spec.layer_count = 4;
    spec.unfreeze_fraction = 2.0;
    EXPECT_THROW(instantiate(spec, SyntheticProvider(tiny_backbone_layout(), 1), 0), DomainError);
}

TEST(Instantiate, ProbabilitiesLieInUnitInterval) {
    const auto m = tiny_model();
    std::mt19937_64 rng(4);
    PatchSample zero;
    zero.pixels = cv::Mat::zeros(200, 200, CV_8UC3);
    const float p0 = m.predict_probability(zero);
    EXPECT_GE(p0, 0.0f);
    EXPECT_LE(p0, 1.0f);
    std::vector<PatchSample> batch;
    for (int i = 0; i < 5; ++i) {
        PatchSample s;
        s.pixels = pavecrack::testing::random_frame(rng, 200, 200);
        batch.push_back(s);
    }
    const auto probs = m.predict_probabilities(batch);
    ASSERT_EQ(probs.size(), 5u);
    for (std::size_t i = 0; i < probs.size(); ++i) {
        EXPECT_GE(probs[i], 0.0f);
        EXPECT_LE(probs[i], 1.0f);
        EXPECT_NEAR(probs[i], m.predict_probability(batch[i]), 1e-5);
    }
}

TEST(Preprocess, ResizesAndNormalizes) {
    const auto spec = find_backbone("VGG16");
    PatchSample s;
    s.pixels = cv::Mat(200, 200, CV_8UC3, cv::Scalar(10, 20, 30));
    const auto t = preprocess(s, spec);
    EXPECT_EQ(t.n, 1);
    EXPECT_EQ(t.c, 3);
    EXPECT_EQ(t.h, 224);
    EXPECT_EQ(t.w, 224);
    for (int c = 0; c < 3; ++c) {
        const float expected = spec.preprocessing.normalize(c, static_cast<float>(10 * (c + 1)));
        for (int y = 0; y < 224; y += 37)
            for (int x = 0; x < 224; x += 41) EXPECT_FLOAT_EQ(t.at(0, c, y, x), expected);
    }
    const auto t2 = preprocess(s, spec);
    EXPECT_EQ(t.data, t2.data);
    PatchSample gray;
    gray.pixels = cv::Mat(200, 200, CV_8UC1, cv::Scalar(0));
    EXPECT_THROW(preprocess(gray, spec), FormatError);
}

TEST(Archive, Sha256MatchesKnownDigest) {
    TempDir dir;
    std::ofstream(dir / "abc.txt", std::ios::binary) << "abc";
    EXPECT_EQ(sha256_file(dir / "abc.txt"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Archive, LockfileRoundTrip) {
    TempDir dir;
    const std::vector<LockEntry> entries{{"A", "https://a", std::string(64, 'a')}, {"B", "file:b", std::string(64, '0')}};
    write_lockfile(entries, dir / "weights.lock");
    const auto back = read_lockfile(dir / "weights.lock");
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back[i].name, entries[i].name);
        EXPECT_EQ(back[i].source_uri, entries[i].source_uri);
        EXPECT_EQ(back[i].digest, entries[i].digest);
    }
    EXPECT_THROW(read_lockfile(dir / "missing.lock"), ProvenanceError);
}

TEST(ArchiveProvider, LoadsVerifiedArchive) {
    TempDir dir;
    const auto spec = write_tiny_cache(dir.path());
    const auto m = instantiate(spec, ArchiveProvider(dir.path()), 3);
    const Backbone ref = SyntheticProvider(tiny_backbone_layout(), 9).load(spec);
    ASSERT_EQ(m.layer_count(), 4);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(m.units()[i].parameters()[0]->value, ref.units[i].parameters()[0]->value);
    }
}

TEST(ArchiveProvider, MissingArchiveIsProvenanceError) {
    TempDir dir;
    auto spec = write_tiny_cache(dir.path());
    fs::remove(dir / spec.pretrained_source);
    try {
        ArchiveProvider(dir.path()).load(spec);
        FAIL() << "expected ProvenanceError";
    } catch (const ProvenanceError& e) {
        EXPECT_NE(std::string(e.what()).find("TinyArchive"), std::string::npos);
    }
    EXPECT_THROW(ArchiveProvider(dir / "nowhere").load(find_backbone("VGG16")), ProvenanceError);
}

TEST(ArchiveProvider, DigestMismatchIsIntegrityError) {
    TempDir dir;
    const auto spec = write_tiny_cache(dir.path());
    {
        std::fstream f(dir / spec.pretrained_source, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-1, std::ios::end);
        f.put('\x7f');
    }
    EXPECT_THROW(ArchiveProvider(dir.path()).load(spec), IntegrityError);
}

TEST(ArchiveProvider, MissingLockRecordIsProvenanceError) {
    TempDir dir;
    const auto spec = write_tiny_cache(dir.path());
    write_lockfile({}, dir / "weights.lock");
    EXPECT_THROW(ArchiveProvider(dir.path()).load(spec), ProvenanceError);
}

TEST(Archive, CorruptFilesAreProvenanceErrors) {
    TempDir dir;
    std::ofstream(dir / "junk.pcw", std::ios::binary) << "not an archive";
    EXPECT_THROW(read_archive(dir / "junk.pcw"), ProvenanceError);
    const auto spec = write_tiny_cache(dir.path());
    const auto full = fs::file_size(dir / spec.pretrained_source);
    fs::resize_file(dir / spec.pretrained_source, full - 10);
    EXPECT_THROW(read_archive(dir / spec.pretrained_source), ProvenanceError);
}

TEST(Checkpoint, RoundTripPreservesPredictionsAndTrainability) {
    TempDir dir;
    auto m = tiny_model(11);
    m.unfreeze_top(0.5);
    const auto data = pavecrack::testing::crack_dataset(8, 2);
    std::vector<float> targets;
    for (const auto& s : data) targets.push_back(s.label == Label::Positive ? 1.0f : 0.0f);
    m.train_step(preprocess_batch(data, m.spec()), targets, {});
    m.save_checkpoint(dir / "ckpt.pcw", {{"seed", "11"}});

    const auto back = ClassifierModel::load_checkpoint(dir / "ckpt.pcw");
    EXPECT_EQ(back.trainable_unit_count(), m.trainable_unit_count());
    EXPECT_EQ(back.spec().name, m.spec().name);
    EXPECT_EQ(back.total_parameter_count(), m.total_parameter_count());
    const auto a = m.predict_probabilities(data);
    const auto b = back.predict_probabilities(data);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    EXPECT_EQ(read_archive(dir / "ckpt.pcw").attributes.at("seed"), "11");

    TempDir cache;
    const auto spec = write_tiny_cache(cache.path());
    EXPECT_THROW(ClassifierModel::load_checkpoint(cache / spec.pretrained_source), ProvenanceError);
}

TEST(TrainStep, OnlyTrainableParametersChange) {
    auto m = tiny_model(2);
    m.unfreeze_top(0.25);
    std::vector<std::vector<float>> before;
    m.visit_parameters([&](const std::string&, const nn::Parameter& p, bool) { before.push_back(p.value); });
    const auto data = pavecrack::testing::crack_dataset(6, 3);
    std::vector<float> targets;
    for (const auto& s : data) targets.push_back(s.label == Label::Positive ? 1.0f : 0.0f);
    const auto r = m.train_step(preprocess_batch(data, m.spec()), targets, {});
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_LE(r.correct, data.size());
    std::size_t i = 0;
    m.visit_parameters([&](const std::string& owner, const nn::Parameter& p, bool trainable) {
        if (trainable) {
            EXPECT_NE(p.value, before[i]) << owner << " " << p.name;
        } else {
            EXPECT_EQ(p.value, before[i]) << owner << " " << p.name;
        }
        ++i;
    });
}
