// Architecture registry, split-unit partitioning, and structure-only
// blueprint serialization. Split-unit granularity: one conv/FC layer per unit
// for plain stacks (activation and pooling travel with the preceding conv),
// one residual block per unit for residual stacks, with unit 0 being the stem
// conv.

#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "splitshield/graph.hpp"

namespace splitshield {

namespace {

struct UnitBuilder {
    std::vector<LayerSpec> layers;
    std::vector<std::size_t> unit_offsets;

    void unit(std::vector<LayerSpec> ls) {
        unit_offsets.push_back(layers.size());
        for (auto& l : ls) layers.push_back(std::move(l));
    }
};

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

LayerSpec basic_block(std::size_t in_ch, std::size_t out_ch, std::size_t stride) {
    std::vector<LayerSpec> body = {conv2d(in_ch, out_ch, 3, stride, 1), batch_norm2d(out_ch),
                                   relu(), conv2d(out_ch, out_ch, 3, 1, 1), batch_norm2d(out_ch)};
    std::vector<LayerSpec> shortcut;
    if (stride != 1 || in_ch != out_ch)
        shortcut = {conv2d(in_ch, out_ch, 1, stride, 0), batch_norm2d(out_ch)};
    return residual(std::move(body), std::move(shortcut));
}

ModelGraph build_tiny(const ArchSpec& spec, std::size_t conv_units) {
    const auto& in = spec.input_shape;
    require(in.size() == 3, "tiny: input shape must be CxHxW");
    const std::size_t pools = conv_units == 2 ? 2 : 3;
    const std::size_t div = std::size_t{1} << pools;
    require(in[1] % div == 0 && in[2] % div == 0 && in[1] >= div && in[2] >= div,
            "tiny: spatial dims must be divisible by " + std::to_string(div));
    static const std::size_t widths[] = {8, 16, 24, 32};
    UnitBuilder b;
    std::size_t ch = in[0];
    std::size_t h = in[1], w = in[2];
    for (std::size_t u = 0; u < conv_units; ++u) {
        const bool pool = u < pools;
        std::vector<LayerSpec> ls = {conv2d(ch, widths[u], 3, 1, 1), relu()};
        if (pool) {
            ls.push_back(max_pool2d(2, 2, 0));
            h /= 2;
            w /= 2;
        }
        ch = widths[u];
        b.unit(std::move(ls));
    }
    b.unit({flatten(), dense(ch * h * w, spec.class_count)});
    ModelGraph g;
    g.input_shape = in;
    g.class_count = spec.class_count;
    g.layers = std::move(b.layers);
    g.unit_offsets = std::move(b.unit_offsets);
    return g;
}

ModelGraph build_resnet18(const ArchSpec& spec) {
    const auto& in = spec.input_shape;
    require(in.size() == 3, "resnet18: input shape must be CxHxW");
    require(in[1] % 32 == 0 && in[2] % 32 == 0, "resnet18: spatial dims must be divisible by 32");
    UnitBuilder b;
    b.unit({conv2d(in[0], 64, 7, 2, 3), batch_norm2d(64), relu()});
    b.unit({max_pool2d(3, 2, 1), basic_block(64, 64, 1)});
    b.unit({basic_block(64, 64, 1)});
    b.unit({basic_block(64, 128, 2)});
    b.unit({basic_block(128, 128, 1)});
    b.unit({basic_block(128, 256, 2)});
    b.unit({basic_block(256, 256, 1)});
    b.unit({basic_block(256, 512, 2)});
    b.unit({basic_block(512, 512, 1)});
    b.unit({avg_pool_global(), flatten(), dense(512, spec.class_count)});
    ModelGraph g;
    g.input_shape = in;
    g.class_count = spec.class_count;
    g.layers = std::move(b.layers);
    g.unit_offsets = std::move(b.unit_offsets);
    return g;
}

ModelGraph build_vgg16(const ArchSpec& spec) {
    const auto& in = spec.input_shape;
    require(in.size() == 3, "vgg16: input shape must be CxHxW");
    require(in[1] % 32 == 0 && in[2] % 32 == 0, "vgg16: spatial dims must be divisible by 32");
    struct Conv {
        std::size_t out;
        bool pool;
    };
    static const Conv plan[] = {{64, false},  {64, true},   {128, false}, {128, true},
                                {256, false}, {256, false}, {256, true},  {512, false},
                                {512, false}, {512, true},  {512, false}, {512, false},
                                {512, true}};
    UnitBuilder b;
    std::size_t ch = in[0];
    std::size_t h = in[1], w = in[2];
    for (const auto& c : plan) {
        std::vector<LayerSpec> ls = {conv2d(ch, c.out, 3, 1, 1), relu()};
        if (c.pool) {
            ls.push_back(max_pool2d(2, 2, 0));
            h /= 2;
            w /= 2;
        }
        ch = c.out;
        b.unit(std::move(ls));
    }
    b.unit({flatten(), dense(ch * h * w, 4096), relu()});
    b.unit({dense(4096, 4096), relu()});
    b.unit({dense(4096, spec.class_count)});
    ModelGraph g;
    g.input_shape = in;
    g.class_count = spec.class_count;
    g.layers = std::move(b.layers);
    g.unit_offsets = std::move(b.unit_offsets);
    return g;
}

}  // namespace

ModelGraph strip_weights(const ModelGraph& g) {
    ModelGraph out = g;
    SeedStream zero(0);
    init_weights(out, zero);
    for (auto& [name, t] : out.weights) {
        const bool keep_ones = name.ends_with("gamma") || name.ends_with("rvar");
        std::fill(t.data.begin(), t.data.end(), keep_ones ? 1.0f : 0.0f);
    }
    return out;
}

std::vector<std::string> registered_architectures() {
    return {"tiny", "tiny4", "resnet18", "vgg16"};
}

ModelGraph build_model(const ArchSpec& spec, std::uint64_t seed) {
    require(spec.class_count >= 2, "architecture needs a class count of at least 2");
    ModelGraph g;
    if (spec.name == "tiny") {
        g = build_tiny(spec, 2);
    } else if (spec.name == "tiny4") {
        g = build_tiny(spec, 4);
    } else if (spec.name == "resnet18") {
        g = build_resnet18(spec);
    } else if (spec.name == "vgg16") {
        g = build_vgg16(spec);
    } else {
        throw std::invalid_argument("unknown architecture: " + spec.name);
    }
    SeedStream rng = derive_stream(seed, "weights/" + spec.name);
    init_weights(g, rng);
    return g;
}

// ---------------------------------------------------------------------------
// Splitting

namespace {

// Collects (old name, new name) pairs for layer `spec` when its top-level
// index moves from `old_idx` to `new_idx`.
void collect_rename(const LayerSpec& spec, const std::string& old_base,
                    const std::string& new_base,
                    std::vector<std::pair<std::string, std::string>>& out) {
    std::vector<std::string> olds, news;
    std::vector<LayerSpec> one = {spec};
    collect_names_for(one, old_base, olds);
    collect_names_for(one, new_base, news);
    for (std::size_t i = 0; i < olds.size(); ++i) out.emplace_back(olds[i], news[i]);
}

}  // namespace

ModelPartition split_model(const ModelGraph& g, const SplitPlan& plan) {
    const std::size_t units = g.unit_count();
    require(plan.head_depth >= 1, "split: head depth must be at least 1");
    require(plan.head_depth + plan.tail_depth < units,
            "split: head + tail depths exhaust the graph (" + std::to_string(plan.head_depth) +
                " + " + std::to_string(plan.tail_depth) + " with " + std::to_string(units) +
                " units)");

    auto unit_layer_begin = [&](std::size_t u) {
        return u >= units ? g.layers.size() : g.unit_offsets[u];
    };

    auto make_part = [&](std::size_t ub, std::size_t ue,
                         const std::vector<std::size_t>& in_shape) {
        const std::size_t lb = unit_layer_begin(ub);
        const std::size_t le = unit_layer_begin(ue);
        ModelGraph part;
        part.input_shape = in_shape;
        part.class_count = (ue == units) ? g.class_count : 0;
        for (std::size_t u = ub; u < ue; ++u)
            part.unit_offsets.push_back(g.unit_offsets[u] - lb);
        std::vector<std::pair<std::string, std::string>> renames;
        for (std::size_t i = lb; i < le; ++i) {
            part.layers.push_back(g.layers[i]);
            collect_rename(g.layers[i], "l" + std::to_string(i) + ".",
                           "l" + std::to_string(i - lb) + ".", renames);
        }
        for (const auto& [oldn, newn] : renames) part.weights[newn] = g.weight(oldn);
        return part;
    };

    const std::size_t hu = plan.head_depth;
    const std::size_t bu = units - plan.tail_depth;

    ModelPartition p;
    p.head = make_part(0, hu, g.input_shape);
    p.body = make_part(hu, bu, p.head.output_shape());
    p.tail = make_part(bu, units, p.body.output_shape());
    return p;
}

// ---------------------------------------------------------------------------
// Blueprint JSON (structure only)

namespace {

using nlohmann::json;

json spec_to_json(const LayerSpec& l) {
    json j;
    j["kind"] = layer_kind_name(l.kind);
    if (l.in_ch) j["in_ch"] = l.in_ch;
    if (l.out_ch) j["out_ch"] = l.out_ch;
    if (l.ksize) j["ksize"] = l.ksize;
    if (l.stride != 1) j["stride"] = l.stride;
    if (l.pad) j["pad"] = l.pad;
    if (l.out_pad) j["out_pad"] = l.out_pad;
    if (l.in_features) j["in_features"] = l.in_features;
    if (l.out_features) j["out_features"] = l.out_features;
    if (!l.body.empty()) {
        j["body"] = json::array();
        for (const auto& c : l.body) j["body"].push_back(spec_to_json(c));
    }
    if (!l.shortcut.empty()) {
        j["shortcut"] = json::array();
        for (const auto& c : l.shortcut) j["shortcut"].push_back(spec_to_json(c));
    }
    return j;
}

LayerSpec spec_from_json(const json& j) {
    LayerSpec l;
    l.kind = layer_kind_from_name(j.at("kind").get<std::string>());
    l.in_ch = j.value("in_ch", 0u);
    l.out_ch = j.value("out_ch", 0u);
    l.ksize = j.value("ksize", 0u);
    l.stride = j.value("stride", 1u);
    l.pad = j.value("pad", 0u);
    l.out_pad = j.value("out_pad", 0u);
    l.in_features = j.value("in_features", 0u);
    l.out_features = j.value("out_features", 0u);
    if (j.contains("body"))
        for (const auto& c : j.at("body")) l.body.push_back(spec_from_json(c));
    if (j.contains("shortcut"))
        for (const auto& c : j.at("shortcut")) l.shortcut.push_back(spec_from_json(c));
    return l;
}

}  // namespace

std::string graph_blueprint_json(const ModelGraph& g) {
    json j;
    j["input_shape"] = g.input_shape;
    j["class_count"] = g.class_count;
    j["unit_offsets"] = g.unit_offsets;
    j["layers"] = json::array();
    for (const auto& l : g.layers) j["layers"].push_back(spec_to_json(l));
    return j.dump(2);
}

ModelGraph graph_from_blueprint_json(const std::string& text) {
    const json j = json::parse(text);
    ModelGraph g;
    g.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
    g.class_count = j.at("class_count").get<std::size_t>();
    g.unit_offsets = j.at("unit_offsets").get<std::vector<std::size_t>>();
    for (const auto& lj : j.at("layers")) g.layers.push_back(spec_from_json(lj));
    SeedStream zero(0);
    init_weights(g, zero);  // allocates shapes; values come from a checkpoint
    return g;
}

}  // namespace splitshield
