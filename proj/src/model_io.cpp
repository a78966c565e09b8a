// SPDX-License-Identifier: Apache-2.0
#include "bnas/model_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bnas/errors.hpp"
#include "bnas/rng.hpp"

namespace bnas {

using nlohmann::json;

Batch Dataset::batch(std::int64_t begin, std::int64_t count) const {
    begin = std::clamp<std::int64_t>(begin, 0, size());
    count = std::clamp<std::int64_t>(count, 0, size() - begin);
    Batch b;
    b.shape = TensorShape{count, channels, height, width};
    const auto n = sample_numel();
    b.inputs.assign(images.begin() + begin * n, images.begin() + (begin + count) * n);
    b.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
    return b;
}

Batch Dataset::gather(std::span<const std::int64_t> indices) const {
    Batch b;
    const auto count = static_cast<std::int64_t>(indices.size());
    b.shape = TensorShape{count, channels, height, width};
    const auto n = sample_numel();
    b.inputs.reserve(static_cast<std::size_t>(count * n));
    for (auto i : indices) {
        b.inputs.insert(b.inputs.end(), images.begin() + i * n, images.begin() + (i + 1) * n);
        b.labels.push_back(labels.at(static_cast<std::size_t>(i)));
    }
    return b;
}

Dataset Dataset::head(std::int64_t count) const {
    Dataset d = *this;
    count = std::clamp<std::int64_t>(count, 0, size());
    d.images.resize(static_cast<std::size_t>(count * sample_numel()));
    d.labels.resize(static_cast<std::size_t>(count));
    return d;
}

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

std::uint64_t checksum(std::string_view s) {
    return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void put_f32_le(std::string& out, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= std::uint32_t(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

std::uint32_t get_u32_be(const unsigned char* p) {
    return std::uint32_t(p[0]) << 24 | std::uint32_t(p[1]) << 16 | std::uint32_t(p[2]) << 8 | std::uint32_t(p[3]);
}

void put_u32_be(std::string& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

json parse_json(std::string_view text, const char* what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string(what) + ": " + e.what());
    }
}

} // namespace

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write to " + tmp.string() + " failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move " + tmp.string() + " to " + path.string());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string weight_payload(const ModelGraph& graph) {
    std::string out;
    for (const auto& [key, t] : graph.weights())
        for (float v : t.data) put_f32_le(out, v);
    return out;
}

std::string model_manifest(const ModelGraph& graph, std::string_view payload) {
    json doc;
    doc["format_version"] = kFormatVersion;
    doc["checksum"] = hex64(checksum(payload));
    doc["input"] = graph.input_id();
    doc["output"] = graph.output_id();
    json nodes = json::array();
    for (const auto& n : graph.nodes()) {
        json j;
        j["id"] = n.id;
        j["op"] = std::string(to_string(n.kind));
        j["inputs"] = n.inputs;
        j["attrs"] = n.attrs;
        j["weights"] = n.weight_refs;
        nodes.push_back(std::move(j));
    }
    doc["nodes"] = std::move(nodes);
    json index = json::array();
    std::uint64_t offset = 0;
    for (const auto& [key, t] : graph.weights()) {
        index.push_back({{"key", key}, {"offset", offset}, {"count", t.data.size()}, {"shape", t.shape.dims}});
        offset += 4 * t.data.size();
    }
    doc["weight_index"] = std::move(index);
    return doc.dump(2) + "\n";
}

ModelGraph parse_model(std::string_view manifest, std::string_view payload) {
    const auto doc = parse_json(manifest, "model manifest");
    try {
        const int version = doc.at("format_version").get<int>();
        if (version != kFormatVersion) throw ParseError("unsupported format version " + std::to_string(version));

        struct Entry {
            std::string key;
            std::uint64_t offset, count;
            std::vector<std::int64_t> shape;
        };
        std::vector<Entry> entries;
        for (const auto& e : doc.at("weight_index")) {
            Entry en{e.at("key").get<std::string>(), e.at("offset").get<std::uint64_t>(),
                     e.at("count").get<std::uint64_t>(), e.at("shape").get<std::vector<std::int64_t>>()};
            if (en.offset > payload.size() || en.count > (payload.size() - en.offset) / 4)
                throw WeightIndexOutOfBounds("tensor '" + en.key + "' spans bytes [" + std::to_string(en.offset) +
                                             ", " + std::to_string(en.offset + 4 * en.count) + ") of a " +
                                             std::to_string(payload.size()) + "-byte payload");
            entries.push_back(std::move(en));
        }
        auto by_offset = entries;
        std::sort(by_offset.begin(), by_offset.end(), [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
        for (std::size_t i = 1; i < by_offset.size(); ++i)
            if (by_offset[i - 1].offset + 4 * by_offset[i - 1].count > by_offset[i].offset)
                throw ParseError("tensors '" + by_offset[i - 1].key + "' and '" + by_offset[i].key + "' overlap");

        const auto stored = doc.at("checksum").get<std::string>();
        if (stored != hex64(checksum(payload)))
            throw ChecksumMismatch("payload checksum " + hex64(checksum(payload)) + " does not match manifest " + stored);

        WeightStore weights;
        const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
        for (const auto& en : entries) {
            Tensor t;
            t.shape = TensorShape(en.shape);
            if (t.shape.numel() != static_cast<std::int64_t>(en.count))
                throw ParseError("tensor '" + en.key + "' shape " + t.shape.str() + " disagrees with count " +
                                 std::to_string(en.count));
            t.data.resize(en.count);
            for (std::uint64_t i = 0; i < en.count; ++i) t.data[i] = get_f32_le(bytes + en.offset + 4 * i);
            if (!weights.emplace(en.key, std::move(t)).second) throw ParseError("duplicate tensor '" + en.key + "'");
        }

        std::vector<LayerNode> nodes;
        for (const auto& j : doc.at("nodes")) {
            LayerNode n;
            n.id = j.at("id").get<std::string>();
            const auto op = j.at("op").get<std::string>();
            auto kind = parse_op_kind(op);
            if (!kind) throw ParseError("node '" + n.id + "' has unknown op '" + op + "'");
            n.kind = *kind;
            if (j.contains("inputs")) n.inputs = j["inputs"].get<std::vector<std::string>>();
            if (j.contains("attrs")) n.attrs = j["attrs"].get<Attrs>();
            if (j.contains("weights")) n.weight_refs = j["weights"].get<std::map<std::string, std::string>>();
            nodes.push_back(std::move(n));
        }
        ModelGraph graph(std::move(nodes), std::move(weights));
        require_valid(graph);
        return graph;
    } catch (const json::exception& e) {
        throw ParseError(std::string("model manifest: ") + e.what());
    }
}

ModelGraph load_model(const fs::path& manifest_path, const fs::path& weights_path) {
    return parse_model(read_file(manifest_path), read_file(weights_path));
}

void save_model(const ModelGraph& graph, const fs::path& manifest_path, const fs::path& weights_path) {
    const auto payload = weight_payload(graph);
    const auto manifest = model_manifest(graph, payload);
    write_file_atomic(weights_path, payload);
    write_file_atomic(manifest_path, manifest);
}

namespace {

struct IdxFile {
    std::vector<std::uint32_t> dims;
    std::string bytes;
    std::size_t data_offset = 0;
};

IdxFile read_idx(const fs::path& path, std::uint32_t magic, const char* what) {
    IdxFile f;
    f.bytes = read_file(path);
    const auto* p = reinterpret_cast<const unsigned char*>(f.bytes.data());
    if (f.bytes.size() < 4 || get_u32_be(p) != magic) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "expected magic 0x%08x", magic);
        throw BadMagic(path.string() + " is not an IDX " + what + " file (" + buf + ")");
    }
    const auto ndims = magic & 0xff;
    if (f.bytes.size() < 4 + 4 * ndims) throw ParseError(path.string() + ": truncated IDX header");
    std::size_t total = 1;
    for (std::uint32_t d = 0; d < ndims; ++d) {
        f.dims.push_back(get_u32_be(p + 4 + 4 * d));
        total *= f.dims.back();
    }
    f.data_offset = 4 + 4 * ndims;
    if (f.bytes.size() < f.data_offset + total) throw ParseError(path.string() + ": truncated IDX payload");
    return f;
}

} // namespace

Dataset load_idx_dataset(const fs::path& images_path, const fs::path& labels_path, std::int64_t limit,
                         std::int64_t num_classes) {
    const auto img = read_idx(images_path, 0x00000803, "image");
    const auto lab = read_idx(labels_path, 0x00000801, "label");
    if (img.dims[0] != lab.dims[0])
        throw DimensionMismatch(std::to_string(img.dims[0]) + " images but " + std::to_string(lab.dims[0]) + " labels");

    std::int64_t n = img.dims[0];
    if (limit > 0) n = std::min(n, limit);
    Dataset d;
    d.channels = 1;
    d.height = img.dims[1];
    d.width = img.dims[2];
    const auto pixels = static_cast<std::size_t>(n * d.sample_numel());
    d.images.resize(pixels);
    const auto* ip = reinterpret_cast<const unsigned char*>(img.bytes.data()) + img.data_offset;
    for (std::size_t i = 0; i < pixels; ++i) d.images[i] = static_cast<float>(ip[i]) / 255.0f;
    const auto* lp = reinterpret_cast<const unsigned char*>(lab.bytes.data()) + lab.data_offset;
    std::int32_t max_label = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        d.labels.push_back(lp[i]);
        max_label = std::max<std::int32_t>(max_label, lp[i]);
    }
    d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
    if (max_label >= d.num_classes)
        throw DimensionMismatch("label " + std::to_string(max_label) + " outside " + std::to_string(d.num_classes) +
                                " classes");
    return d;
}

void save_idx_dataset(const Dataset& data, const fs::path& images_path, const fs::path& labels_path) {
    if (data.channels != 1) throw ConfigError("IDX output supports single-channel images only");
    std::string img, lab;
    put_u32_be(img, 0x00000803);
    put_u32_be(img, static_cast<std::uint32_t>(data.size()));
    put_u32_be(img, static_cast<std::uint32_t>(data.height));
    put_u32_be(img, static_cast<std::uint32_t>(data.width));
    for (float v : data.images)
        img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    put_u32_be(lab, 0x00000801);
    put_u32_be(lab, static_cast<std::uint32_t>(data.size()));
    for (auto l : data.labels) lab.push_back(static_cast<char>(static_cast<unsigned char>(l)));
    write_file_atomic(images_path, img);
    write_file_atomic(labels_path, lab);
}

Dataset make_synthetic_dataset(std::uint64_t seed, std::int64_t num_samples, std::int64_t num_classes,
                               const TensorShape& shape) {
    if (num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (shape.rank() != 3 || shape[0] < 1 || shape[1] < 1 || shape[2] < 1) throw ConfigError("sample shape must be (C,H,W), got " + shape.str());
    Dataset d;
    d.channels = shape[0], d.height = shape[1], d.width = shape[2];
    d.num_classes = num_classes;
    Rng rng(seed);
    const auto n = d.sample_numel();
    d.images.reserve(static_cast<std::size_t>(num_samples * n));
    for (std::int64_t i = 0; i < num_samples; ++i) {
        const auto label = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(num_classes)));
        d.labels.push_back(label);
        const double mean = (label + 0.5) / double(num_classes);
        for (std::int64_t j = 0; j < n; ++j)
            d.images.push_back(static_cast<float>(std::clamp(mean + 0.1 * rng.normal(), 0.0, 1.0)));
    }
    return d;
}

// --- structured-text documents ------------------------------------------------

namespace {

json config_json(const SubnetworkConfig& c) {
    return json{{"width", c.width_choice}, {"kernel", c.kernel_choice}, {"skip", c.skip_mask}};
}

/// Reads declared keys of an object, rejecting unknown ones.
class Reader {
public:
    Reader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
        if (!obj_.is_object()) throw ConfigError(where_ + " must be an object");
    }
    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (const auto& [k, v] : obj_.items())
            if (!seen_.count(k)) throw ConfigError("unknown key '" + k + "' in " + where_);
    }
    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!obj_.contains(key)) return;
        try {
            out = obj_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("bad value for '" + std::string(key) + "' in " + where_);
        }
    }
    const json* sub(const char* key) {
        seen_.insert(key);
        return obj_.contains(key) ? &obj_.at(key) : nullptr;
    }

private:
    const json& obj_;
    std::string where_;
    std::set<std::string> seen_;
};

const char* dimension_name(DimensionKind k) {
    switch (k) {
    case DimensionKind::Width: return "width";
    case DimensionKind::Kernel: return "kernel";
    case DimensionKind::Depth: return "depth";
    }
    return "?";
}

DimensionKind parse_dimension(const std::string& s) {
    if (s == "width") return DimensionKind::Width;
    if (s == "kernel") return DimensionKind::Kernel;
    if (s == "depth") return DimensionKind::Depth;
    throw ConfigError("unknown dimension '" + s + "'");
}

json policy_json(const ElasticityPolicy& p) {
    return json{{"width_divisor", p.width_divisor},
                {"min_width", p.min_width},
                {"max_width_options", p.max_width_options},
                {"min_kernel", p.min_kernel},
                {"reorder_channels", p.reorder_channels}};
}

void read_policy(const json& j, ElasticityPolicy& p) {
    Reader r(j, "elasticity");
    r.get("width_divisor", p.width_divisor);
    r.get("min_width", p.min_width);
    r.get("max_width_options", p.max_width_options);
    r.get("min_kernel", p.min_kernel);
    r.get("reorder_channels", p.reorder_channels);
}

} // namespace

std::string to_json(const SubnetworkConfig& config) { return config_json(config).dump(2) + "\n"; }

SubnetworkConfig subnetwork_config_from_json(std::string_view text) {
    const auto doc = parse_json(text, "subnetwork config");
    SubnetworkConfig c;
    Reader r(doc, "subnetwork config");
    r.get("width", c.width_choice);
    r.get("kernel", c.kernel_choice);
    r.get("skip", c.skip_mask);
    return c;
}

std::string to_json(const ElasticityPolicy& policy) { return policy_json(policy).dump(2) + "\n"; }

ElasticityPolicy policy_from_json(std::string_view text) {
    ElasticityPolicy p;
    read_policy(parse_json(text, "elasticity policy"), p);
    validate(p);
    return p;
}

std::string to_json(const RunConfig& c) {
    const auto& t = c.training;
    std::vector<std::string> stages;
    for (auto s : t.stages) stages.push_back(dimension_name(s));
    json training{{"schedule", t.kind == TrainingSchedule::Kind::Sandwich ? "sandwich" : "progressive_shrinking"},
                  {"stages", stages},
                  {"epochs_per_stage", t.epochs_per_stage},
                  {"epochs", t.epochs},
                  {"n_random", t.n_random},
                  {"distillation", t.distillation},
                  {"teacher", t.teacher == TrainingSchedule::Teacher::Maximal ? "maximal" : "original"},
                  {"alpha", t.alpha},
                  {"temperature", t.temperature},
                  {"batch_size", t.batch_size},
                  {"learning_rate", t.learning_rate},
                  {"momentum", t.momentum},
                  {"weight_decay", t.weight_decay}};
    const auto& s = c.search;
    json search{{"population", s.population},   {"crossover_rate", s.crossover_rate},
                {"mutation_rate", s.mutation_rate}, {"budget", s.budget},
                {"generations", s.generations}, {"front_size", s.front_size},
                {"tournament_size", s.tournament_size}, {"val_samples", s.val_samples},
                {"jobs", s.jobs}};
    json doc{{"seed", c.seed}, {"elasticity", policy_json(c.elasticity)}, {"training", training}, {"search", search}};
    return doc.dump(2) + "\n";
}

RunConfig run_config_from_json(std::string_view text) {
    const auto doc = parse_json(text, "run config");
    RunConfig c;
    {
        Reader r(doc, "run config");
        r.get("seed", c.seed);
        if (auto* e = r.sub("elasticity")) read_policy(*e, c.elasticity);
        if (auto* tj = r.sub("training")) {
            auto& t = c.training;
            Reader tr(*tj, "training");
            std::string schedule = t.kind == TrainingSchedule::Kind::Sandwich ? "sandwich" : "progressive_shrinking";
            tr.get("schedule", schedule);
            if (schedule == "sandwich")
                t.kind = TrainingSchedule::Kind::Sandwich;
            else if (schedule == "progressive_shrinking")
                t.kind = TrainingSchedule::Kind::ProgressiveShrinking;
            else
                throw ConfigError("unknown schedule '" + schedule + "'");
            if (const auto* st = tr.sub("stages")) {
                if (!st->is_array()) throw ConfigError("training.stages must be a list");
                t.stages.clear();
                for (const auto& s : *st) {
                    if (!s.is_string()) throw ConfigError("training.stages entries must be strings");
                    t.stages.push_back(parse_dimension(s.get<std::string>()));
                }
            }
            tr.get("epochs_per_stage", t.epochs_per_stage);
            tr.get("epochs", t.epochs);
            tr.get("n_random", t.n_random);
            tr.get("distillation", t.distillation);
            std::string teacher = t.teacher == TrainingSchedule::Teacher::Maximal ? "maximal" : "original";
            tr.get("teacher", teacher);
            if (teacher == "maximal")
                t.teacher = TrainingSchedule::Teacher::Maximal;
            else if (teacher == "original")
                t.teacher = TrainingSchedule::Teacher::Original;
            else
                throw ConfigError("unknown teacher '" + teacher + "'");
            tr.get("alpha", t.alpha);
            tr.get("temperature", t.temperature);
            tr.get("batch_size", t.batch_size);
            tr.get("learning_rate", t.learning_rate);
            tr.get("momentum", t.momentum);
            tr.get("weight_decay", t.weight_decay);
        }
        if (auto* sj = r.sub("search")) {
            auto& s = c.search;
            Reader sr(*sj, "search");
            sr.get("population", s.population);
            sr.get("crossover_rate", s.crossover_rate);
            sr.get("mutation_rate", s.mutation_rate);
            sr.get("budget", s.budget);
            sr.get("generations", s.generations);
            sr.get("front_size", s.front_size);
            sr.get("tournament_size", s.tournament_size);
            sr.get("val_samples", s.val_samples);
            sr.get("jobs", s.jobs);
        }
    }
    validate(c);
    return c;
}

namespace {

json space_json(const SearchSpace& space) {
    json groups = json::array();
    for (const auto& g : space.width_groups)
        groups.push_back(
            {{"id", g.id}, {"members", g.members}, {"max_channels", g.max_channels}, {"options", g.options}});
    json blocks = json::array();
    for (const auto& b : space.skippable_blocks)
        blocks.push_back({{"id", b.id}, {"nodes", b.nodes}, {"source", b.source}, {"sink", b.sink}});
    return json{{"width_groups", groups},
                {"kernel_dims", space.kernel_dims},
                {"skippable_blocks", blocks},
                {"cardinality", space.cardinality()}};
}

} // namespace

std::string to_json(const SearchSpace& space) { return space_json(space).dump(2) + "\n"; }

void save_supernet(const SuperNetwork& net, const ElasticityPolicy& policy, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string());
    save_model(net.base(), dir / "model.json", dir / "model.bin");
    json doc{{"policy", policy_json(policy)}, {"space", space_json(net.space())}};
    write_file_atomic(dir / "space.json", doc.dump(2) + "\n");
}

LoadedSupernet load_supernet(const fs::path& dir) {
    auto graph = load_model(dir / "model.json", dir / "model.bin");
    const auto doc = parse_json(read_file(dir / "space.json"), "space description");
    if (!doc.is_object() || !doc.contains("policy") || !doc.contains("space"))
        throw ParseError("space description needs 'policy' and 'space'");
    ElasticityPolicy policy;
    read_policy(doc["policy"], policy);
    validate(policy);
    auto net = assemble(std::move(graph), policy);
    if (space_json(net.space()) != doc["space"])
        throw ParseError("space description in " + dir.string() + " does not match the model graph");
    return LoadedSupernet{std::move(net), policy};
}

namespace {

std::string format_real(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    // shortest text that parses back to the same double
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_real(const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
}

constexpr std::string_view kArchiveHeader = "config_id,macs,params,top1_accuracy,rank,crowding";

} // namespace

std::string archive_csv(std::span<const ArchiveRow> rows) {
    std::string out(kArchiveHeader);
    out += '\n';
    for (const auto& r : rows) {
        out += r.config_id + ',' + std::to_string(r.macs) + ',' + std::to_string(r.params) + ',' +
               format_real(r.top1_accuracy) + ',' + std::to_string(r.rank) + ',' + format_real(r.crowding) + '\n';
    }
    return out;
}

std::vector<ArchiveRow> parse_archive_csv(std::string_view text) {
    std::vector<ArchiveRow> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != kArchiveHeader) throw ParseError("archive CSV header mismatch");
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 6) throw ParseError("archive line " + std::to_string(lineno) + ": expected 6 fields");
        try {
            rows.push_back({f[0], std::stoll(f[1]), std::stoll(f[2]), parse_real(f[3]), std::stoi(f[4]),
                            parse_real(f[5])});
        } catch (const std::logic_error&) {
            throw ParseError("archive line " + std::to_string(lineno) + ": malformed number");
        }
    }
    return rows;
}

} // namespace bnas
