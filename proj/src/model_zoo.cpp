#include "pavecrack/model_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <opencv2/imgproc.hpp>

#include "pavecrack/errors.hpp"

namespace pavecrack {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kStandInWeightSeed = 20230404;

const Preprocessing kTorchImageNet{false, {123.675f, 116.28f, 103.53f}, {58.395f, 57.12f, 57.375f}};
const Preprocessing kSymmetricUnit{false, {127.5f, 127.5f, 127.5f}, {127.5f, 127.5f, 127.5f}};
const Preprocessing kRawPixels{false, {0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f}};

BackboneSpec make_spec(std::string name, int side, int layers, std::string source, Preprocessing pre) {
    BackboneSpec s;
    s.name = std::move(name);
    s.native_input_side = side;
    s.layer_count = layers;
    s.unfreeze_fraction = 0.25;
    s.pretrained_source = std::move(source);
    s.preprocessing = pre;
    return s;
}

}  // namespace

std::vector<BackboneSpec> list_backbones() {
    // Unit counts are the convolutional (incl. depthwise/separable) layers of each
    // architecture without its classification top.
    return {
        make_spec("EfficientNetB7", 600, 273, "efficientnetb7_imagenet.pcw", kRawPixels),
        make_spec("InceptionV3", 299, 94, "inceptionv3_imagenet.pcw", kSymmetricUnit),
        make_spec("Xception", 299, 40, "xception_imagenet.pcw", kSymmetricUnit),
        make_spec("MobileNetV2", 224, 52, "mobilenetv2_imagenet.pcw", kSymmetricUnit),
        make_spec("ResNet", 224, 53, "resnet50_imagenet.pcw", kTorchImageNet),
        make_spec("VGG16", 224, 13, "vgg16_imagenet.pcw", kTorchImageNet),
    };
}

BackboneSpec tiny_backbone_spec() {
    return make_spec("TinyNet", 64, 4, "synthetic:he-normal", kSymmetricUnit);
}

std::vector<nn::ConvUnitConfig> tiny_backbone_layout() {
    return {
        {"conv1", 3, 8, 3, true, true},
        {"conv2", 8, 16, 3, true, true},
        {"conv3", 16, 32, 3, true, true},
        {"conv4", 32, 32, 3, true, false},
    };
}

std::vector<nn::ConvUnitConfig> vgg16_layout() {
    const int widths[] = {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
    const int block_end[] = {1, 3, 6, 9, 12};
    std::vector<nn::ConvUnitConfig> out;
    int in = 3;
    for (int i = 0; i < 13; ++i) {
        const bool pool = std::find(std::begin(block_end), std::end(block_end), i) != std::end(block_end);
        out.push_back({"features." + std::to_string(i), in, widths[i], 3, false, pool});
        in = widths[i];
    }
    return out;
}

BackboneSpec find_backbone(const std::string& name) {
    for (auto& s : list_backbones()) {
        if (s.name == name) return s;
    }
    if (name == "ResNet50") return list_backbones()[4];
    if (name == tiny_backbone_spec().name) return tiny_backbone_spec();
    throw DomainError("unknown backbone '" + name + "'");
}

// ---------------------------------------------------------------------------
// Archives

namespace {
constexpr char kArchiveMagic[4] = {'P', 'C', 'W', 'A'};

json preprocessing_json(const Preprocessing& p) {
    return {{"bgr", p.bgr}, {"mean", p.mean}, {"std", p.std}};
}

Preprocessing preprocessing_from(const json& j) {
    Preprocessing p;
    p.bgr = j.at("bgr").get<bool>();
    p.mean = j.at("mean").get<std::array<float, 3>>();
    p.std = j.at("std").get<std::array<float, 3>>();
    return p;
}
}  // namespace

const std::vector<float>* WeightsArchive::find(const std::string& name) const {
    for (const auto& [n, values] : tensors) {
        if (n == name) return &values;
    }
    return nullptr;
}

void write_archive(const WeightsArchive& archive, const fs::path& path) {
    json header;
    header["format"] = "pavecrack-weights";
    header["version"] = 1;
    header["backbone"] = archive.backbone;
    header["input_side"] = archive.input_side;
    header["preprocessing"] = preprocessing_json(archive.preprocessing);
    header["units"] = json::array();
    for (const auto& u : archive.units) {
        header["units"].push_back({{"name", u.name},
                                   {"in", u.in_channels},
                                   {"out", u.out_channels},
                                   {"kernel", u.kernel},
                                   {"batch_norm", u.batch_norm},
                                   {"pool", u.pool}});
    }
    header["tensors"] = json::array();
    for (const auto& [name, values] : archive.tensors) {
        header["tensors"].push_back({{"name", name}, {"count", values.size()}});
    }
    header["attributes"] = archive.attributes;
    const std::string text = header.dump();

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write archive '" + path.string() + "'");
    const auto len = static_cast<std::uint32_t>(text.size());
    out.write(kArchiveMagic, 4);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);  // little-endian hosts only
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, values] : archive.tensors) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(float)));
    }
    if (!out) throw PersistenceError("failed writing archive '" + path.string() + "'");
}

WeightsArchive read_archive(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ProvenanceError("weights archive not found: '" + path.string() + "'");
    char magic[4] = {};
    std::uint32_t len = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kArchiveMagic, 4) != 0 || len > (64u << 20)) {
        throw ProvenanceError("corrupt weights archive '" + path.string() + "': bad header");
    }
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (!in) throw ProvenanceError("corrupt weights archive '" + path.string() + "': truncated header");

    WeightsArchive a;
    try {
        const json header = json::parse(text);
        if (header.at("format") != "pavecrack-weights" || header.at("version") != 1) {
            throw ProvenanceError("unsupported archive format in '" + path.string() + "'");
        }
        a.backbone = header.at("backbone").get<std::string>();
        a.input_side = header.at("input_side").get<int>();
        a.preprocessing = preprocessing_from(header.at("preprocessing"));
        for (const auto& u : header.at("units")) {
            a.units.push_back({u.at("name").get<std::string>(), u.at("in").get<int>(), u.at("out").get<int>(),
                               u.at("kernel").get<int>(), u.at("batch_norm").get<bool>(), u.at("pool").get<bool>()});
        }
        for (const auto& t : header.at("tensors")) {
            a.tensors.emplace_back(t.at("name").get<std::string>(),
                                   std::vector<float>(t.at("count").get<std::size_t>()));
        }
        if (header.contains("attributes")) {
            a.attributes = header.at("attributes").get<std::map<std::string, std::string>>();
        }
    } catch (const json::exception& e) {
        throw ProvenanceError("corrupt weights archive '" + path.string() + "': " + e.what());
    }
    for (auto& [name, values] : a.tensors) {
        in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
        if (!in) throw ProvenanceError("corrupt weights archive '" + path.string() + "': tensor '" + name + "' truncated");
    }
    return a;
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ProvenanceError("cannot open '" + path.string() + "' for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &md_len);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < md_len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

std::vector<LockEntry> read_lockfile(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ProvenanceError("weights lockfile not found: '" + path.string() + "'");
    std::vector<LockEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        LockEntry e;
        if (!(fields >> e.name >> e.source_uri >> e.digest)) {
            throw ProvenanceError("malformed lockfile line: '" + line + "'");
        }
        out.push_back(std::move(e));
    }
    return out;
}

void write_lockfile(const std::vector<LockEntry>& entries, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw PersistenceError("cannot write lockfile '" + path.string() + "'");
    out << "# name\tsource_uri\tsha256\n";
    for (const auto& e : entries) out << e.name << '\t' << e.source_uri << '\t' << e.digest << '\n';
}

// ---------------------------------------------------------------------------
// Providers

namespace {

Backbone backbone_from_archive(const WeightsArchive& a, const std::string& origin) {
    Backbone b;
    b.input_side = a.input_side;
    for (const auto& cfg : a.units) {
        nn::ConvUnit unit(cfg);
        auto fill = [&](nn::Parameter* p) {
            const auto* values = a.find(p->name);
            if (!values || values->size() != p->size()) {
                throw ProvenanceError("archive " + origin + " lacks tensor '" + p->name + "' of size " +
                                      std::to_string(p->size()));
            }
            p->value = *values;
        };
        for (auto* p : unit.parameters()) fill(p);
        for (auto* p : unit.buffers()) fill(p);
        b.units.push_back(std::move(unit));
    }
    for (std::size_t i = 1; i < b.units.size(); ++i) {
        if (b.units[i].config().in_channels != b.units[i - 1].config().out_channels) {
            throw ProvenanceError("archive " + origin + " has inconsistent channel counts at unit " + std::to_string(i));
        }
    }
    return b;
}

}  // namespace

ArchiveProvider::ArchiveProvider(fs::path cache_dir) : cache_dir_(std::move(cache_dir)) {}

fs::path ArchiveProvider::default_cache_dir() {
    if (const char* env = std::getenv("PAVECRACK_CACHE"); env && *env) return fs::path(env);
    if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".cache" / "pavecrack";
    return fs::path(".pavecrack-cache");
}

Backbone ArchiveProvider::load(const BackboneSpec& spec) const {
    const fs::path archive_path = cache_dir_ / spec.pretrained_source;
    if (!fs::exists(archive_path)) {
        throw ProvenanceError("pretrained archive for " + spec.name + " not found at '" + archive_path.string() + "'");
    }
    const auto lock = read_lockfile(cache_dir_ / "weights.lock");
    const auto it = std::find_if(lock.begin(), lock.end(), [&](const LockEntry& e) { return e.name == spec.name; });
    if (it == lock.end()) {
        throw ProvenanceError("no weights.lock record for " + spec.name);
    }
    const std::string digest = sha256_file(archive_path);
    if (digest != it->digest) {
        throw IntegrityError("checksum mismatch for " + spec.name + ": expected " + it->digest + ", got " + digest);
    }
    const WeightsArchive a = read_archive(archive_path);
    if (a.backbone != spec.name) {
        throw ProvenanceError("archive '" + archive_path.string() + "' holds " + a.backbone + ", not " + spec.name);
    }
    return backbone_from_archive(a, "'" + archive_path.string() + "'");
}

SyntheticProvider::SyntheticProvider(std::vector<nn::ConvUnitConfig> layout, std::uint64_t seed)
    : layout_(std::move(layout)), seed_(seed) {}

Backbone SyntheticProvider::load(const BackboneSpec& spec) const {
    Backbone b;
    b.input_side = spec.native_input_side;
    std::uint64_t s = seed_;
    for (const auto& cfg : layout_) {
        nn::ConvUnit unit(cfg);
        unit.initialize(s++);
        b.units.push_back(std::move(unit));
    }
    return b;
}

std::unique_ptr<BackboneProvider> default_provider(const BackboneSpec& spec, const fs::path& cache_dir) {
    if (spec.pretrained_source.rfind("synthetic:", 0) == 0) {
        return std::make_unique<SyntheticProvider>(tiny_backbone_layout(), kStandInWeightSeed);
    }
    return std::make_unique<ArchiveProvider>(cache_dir);
}

// ---------------------------------------------------------------------------
// Preprocessing

std::vector<float> PatchClassifier::predict_probabilities(std::span<const PatchSample> patches) const {
    std::vector<float> out;
    out.reserve(patches.size());
    for (const auto& p : patches) out.push_back(predict_probability(p));
    return out;
}

namespace {
void preprocess_into(const PatchSample& patch, const BackboneSpec& spec, float* dst) {
    if (patch.pixels.type() != CV_8UC3) {
        throw FormatError("patch must be 8-bit 3-channel");
    }
    const int side = spec.native_input_side;
    cv::Mat resized;
    if (patch.pixels.rows == side && patch.pixels.cols == side) {
        resized = patch.pixels;
    } else {
        cv::resize(patch.pixels, resized, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
    }
    const auto plane = static_cast<std::size_t>(side) * side;
    const auto& pre = spec.preprocessing;
    for (int y = 0; y < side; ++y) {
        const auto* row = resized.ptr<cv::Vec3b>(y);
        for (int x = 0; x < side; ++x) {
            for (int c = 0; c < 3; ++c) {
                const int src = pre.bgr ? 2 - c : c;
                dst[c * plane + static_cast<std::size_t>(y) * side + x] = pre.normalize(c, row[x][src]);
            }
        }
    }
}
}  // namespace

nn::Tensor preprocess(const PatchSample& patch, const BackboneSpec& spec) {
    nn::Tensor t(1, 3, spec.native_input_side, spec.native_input_side);
    preprocess_into(patch, spec, t.sample(0));
    return t;
}

nn::Tensor preprocess_batch(std::span<const PatchSample> patches, const BackboneSpec& spec) {
    nn::Tensor t(static_cast<int>(patches.size()), 3, spec.native_input_side, spec.native_input_side);
    for (std::size_t i = 0; i < patches.size(); ++i) preprocess_into(patches[i], spec, t.sample(static_cast<int>(i)));
    return t;
}

// ---------------------------------------------------------------------------
// ClassifierModel

ClassifierModel::ClassifierModel(BackboneSpec spec, Backbone backbone, std::uint64_t head_seed)
    : spec_(std::move(spec)), units_(std::move(backbone.units)) {
    if (units_.empty()) throw ProvenanceError("backbone " + spec_.name + " has no units");
    head_ = nn::DenseHead(units_.back().config().out_channels);
    head_.initialize(head_seed);
    freeze_backbone();
}

void ClassifierModel::unfreeze_top(double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw DomainError("unfreeze fraction must lie in [0, 1], got " + std::to_string(fraction));
    }
    const double exact = fraction * layer_count();
    trainable_units_ = std::clamp(static_cast<int>(std::ceil(exact - 1e-9)), 0, layer_count());
}

std::size_t ClassifierModel::trainable_parameter_count() const {
    std::size_t n = head_.parameter_count();
    for (int i = 0; i < layer_count(); ++i) {
        if (unit_trainable(i)) n += units_[i].parameter_count();
    }
    return n;
}

std::size_t ClassifierModel::total_parameter_count() const {
    std::size_t n = head_.parameter_count();
    for (const auto& u : units_) n += u.parameter_count();
    return n;
}

void ClassifierModel::visit_parameters(const ParameterVisitor& visit) const {
    for (int i = 0; i < layer_count(); ++i) {
        for (const auto* p : units_[i].parameters()) visit(units_[i].config().name, *p, unit_trainable(i));
    }
    for (const auto* p : head_.parameters()) visit("head", *p, true);
}

std::vector<float> ClassifierModel::logits(const nn::Tensor& batch) const {
    nn::Tensor x = batch;
    for (const auto& u : units_) x = u.infer(x);
    return head_.infer(x);
}

std::vector<float> ClassifierModel::infer(const nn::Tensor& batch) const {
    auto out = logits(batch);
    for (auto& l : out) l = nn::sigmoid(l);
    return out;
}

float ClassifierModel::predict_probability(const PatchSample& patch) const {
    return infer(preprocess(patch, spec_)).front();
}

std::vector<float> ClassifierModel::predict_probabilities(std::span<const PatchSample> patches) const {
    if (patches.empty()) return {};
    return infer(preprocess_batch(patches, spec_));
}

std::vector<nn::Parameter*> ClassifierModel::trainable_parameters() {
    std::vector<nn::Parameter*> out;
    for (int i = 0; i < layer_count(); ++i) {
        if (!unit_trainable(i)) continue;
        for (auto* p : units_[i].parameters()) out.push_back(p);
    }
    for (auto* p : head_.parameters()) out.push_back(p);
    return out;
}

StepResult ClassifierModel::train_step(const nn::Tensor& batch, const std::vector<float>& targets,
                                       const nn::AdamOptions& optimizer) {
    auto params = trainable_parameters();
    for (auto* p : params) p->zero_grad();

    const int lowest = layer_count() - trainable_units_;
    nn::Tensor x = batch;
    for (int i = 0; i < layer_count(); ++i) {
        x = i < lowest ? units_[i].infer(x) : units_[i].forward(x, /*batch_stats=*/true);
    }
    const auto logits = head_.forward(x);
    std::vector<float> grad;
    StepResult result;
    result.loss = nn::binary_cross_entropy(logits, targets, &grad);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const bool predicted = nn::sigmoid(logits[i]) >= 0.5f;
        if (predicted == (targets[i] >= 0.5f)) ++result.correct;
    }
    if (!std::isfinite(result.loss)) return result;

    nn::Tensor g = head_.backward(grad, trainable_units_ > 0);
    for (int i = layer_count() - 1; i >= lowest; --i) {
        g = units_[i].backward(g, i > lowest);
    }
    for (auto* p : params) nn::adam_step(*p, optimizer);
    return result;
}

void ClassifierModel::save_checkpoint(const fs::path& path, const std::map<std::string, std::string>& attributes) const {
    WeightsArchive a;
    a.backbone = spec_.name;
    a.input_side = spec_.native_input_side;
    a.preprocessing = spec_.preprocessing;
    for (const auto& u : units_) {
        a.units.push_back(u.config());
        for (const auto* p : u.parameters()) a.tensors.emplace_back(p->name, p->value);
        for (const auto* p : u.buffers()) a.tensors.emplace_back(p->name, p->value);
    }
    for (const auto* p : head_.parameters()) a.tensors.emplace_back(p->name, p->value);
    a.attributes = attributes;
    a.attributes["kind"] = "checkpoint";
    a.attributes["layer_count"] = std::to_string(spec_.layer_count);
    a.attributes["unfreeze_fraction"] = std::to_string(spec_.unfreeze_fraction);
    a.attributes["pretrained_source"] = spec_.pretrained_source;
    a.attributes["trainable_units"] = std::to_string(trainable_units_);
    write_archive(a, path);
}

ClassifierModel ClassifierModel::load_checkpoint(const fs::path& path) {
    const WeightsArchive a = read_archive(path);
    if (!a.attributes.contains("kind") || a.attributes.at("kind") != "checkpoint") {
        throw ProvenanceError("'" + path.string() + "' is a backbone archive, not a checkpoint");
    }
    BackboneSpec spec;
    spec.name = a.backbone;
    spec.native_input_side = a.input_side;
    spec.preprocessing = a.preprocessing;
    spec.layer_count = static_cast<int>(a.units.size());
    spec.unfreeze_fraction = std::stod(a.attributes.at("unfreeze_fraction"));
    spec.pretrained_source = a.attributes.at("pretrained_source");

    ClassifierModel model(spec, backbone_from_archive(a, "'" + path.string() + "'"), 0);
    for (auto* p : model.head_.parameters()) {
        const auto* values = a.find(p->name);
        if (!values || values->size() != p->size()) {
            throw ProvenanceError("checkpoint '" + path.string() + "' lacks tensor '" + p->name + "'");
        }
        p->value = *values;
    }
    model.trainable_units_ = std::stoi(a.attributes.at("trainable_units"));
    return model;
}

ClassifierModel instantiate(const BackboneSpec& spec, const BackboneProvider& provider, std::uint64_t head_seed) {
    if (!(spec.unfreeze_fraction >= 0.0 && spec.unfreeze_fraction <= 1.0)) {
        throw DomainError("unfreeze fraction of " + spec.name + " outside [0, 1]");
    }
    Backbone backbone = provider.load(spec);
    if (static_cast<int>(backbone.units.size()) != spec.layer_count) {
        throw IntegrityError(spec.name + ": provider supplied " + std::to_string(backbone.units.size()) +
                             " units, registry expects " + std::to_string(spec.layer_count));
    }
    return ClassifierModel(spec, std::move(backbone), head_seed);
}

ClassifierModel instantiate(const BackboneSpec& spec, std::uint64_t head_seed) {
    const auto provider = default_provider(spec, ArchiveProvider::default_cache_dir());
    return instantiate(spec, *provider, head_seed);
}

ClassifierModel unfreeze_top(ClassifierModel model, double fraction) {
    model.unfreeze_top(fraction);
    return model;
}

}  // namespace pavecrack
