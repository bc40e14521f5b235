#include "specee/weights_io.hpp"

#include "specee/binio.hpp"
#include "specee/rng.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

namespace specee {

std::vector<char> read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const char> data)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("cannot write " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out)
        throw std::runtime_error("write failed for " + path);
}

namespace {

void write_tensor(ByteWriter& w, const std::string& name, std::span<const std::uint32_t> shape,
                  std::span<const float> data)
{
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape)
        w.u32(d);
    w.f32s(data);
}

std::uint32_t config_dim(float v, const char* field)
{
    if (!(v >= 0.0f) || v > 16777216.0f || v != std::floor(v))
        throw FormatError(std::string("bad config field ") + field);
    return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<char> serialize_weights(const TransformerModel& model)
{
    const auto& c = model.config();
    ByteWriter w;
    w.bytes("SPXW");
    w.u32(kWeightFileVersion);
    std::uint32_t count = 1;
    model.visit([&](const Tensor&) { ++count; });
    w.u32(count);

    const std::uint32_t shape[] = {8};
    const float cfg[] = {static_cast<float>(c.vocab_size),
                         static_cast<float>(c.hidden_dim),
                         static_cast<float>(c.num_layers),
                         static_cast<float>(c.num_heads),
                         static_cast<float>(c.ffn_dim),
                         static_cast<float>(c.max_context),
                         std::bit_cast<float>(static_cast<std::uint32_t>(c.seed & 0xffffffffu)),
                         std::bit_cast<float>(static_cast<std::uint32_t>(c.seed >> 32))};
    write_tensor(w, "config", shape, cfg);
    model.visit([&](const Tensor& t) { write_tensor(w, t.name, t.shape, t.data); });
    return w.data();
}

TransformerModel deserialize_weights(std::span<const char> bytes)
{
    ByteReader r(bytes);
    if (r.bytes(4) != "SPXW")
        throw FormatError("bad magic (expected SPXW)");
    if (const auto v = r.u32(); v != kWeightFileVersion)
        throw FormatError("unsupported weight file version " + std::to_string(v));
    const std::uint32_t count = r.u32();

    const auto cfg_name = r.bytes(r.u16());
    if (cfg_name != "config" || r.u8() != 1 || r.u32() != 8)
        throw FormatError("missing config pseudo-tensor");
    float raw[8];
    r.f32s(raw);
    ModelConfig c;
    c.vocab_size = config_dim(raw[0], "vocab_size");
    c.hidden_dim = config_dim(raw[1], "hidden_dim");
    c.num_layers = config_dim(raw[2], "num_layers");
    c.num_heads = config_dim(raw[3], "num_heads");
    c.ffn_dim = config_dim(raw[4], "ffn_dim");
    c.max_context = config_dim(raw[5], "max_context");
    c.seed = static_cast<std::uint64_t>(std::bit_cast<std::uint32_t>(raw[6])) |
             (static_cast<std::uint64_t>(std::bit_cast<std::uint32_t>(raw[7])) << 32);
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("invalid config: ") + e.what());
    }

    TransformerModel model(c);
    std::uint32_t expected = 1;
    model.visit([&](const Tensor&) { ++expected; });
    if (count != expected)
        throw FormatError("tensor count mismatch: file has " + std::to_string(count) + ", config implies " +
                          std::to_string(expected));

    model.visit([&](Tensor& t) {
        const auto name = r.bytes(r.u16());
        if (name != t.name)
            throw FormatError("unexpected tensor '" + name + "', expected '" + t.name + "'");
        const auto rank = r.u8();
        std::vector<std::uint32_t> dims(rank);
        for (auto& d : dims)
            d = r.u32();
        if (dims != t.shape)
            throw FormatError("shape mismatch for tensor '" + name + "'");
        r.f32s(t.data);
        for (float v : t.data)
            if (!std::isfinite(v))
                throw FormatError("non-finite weight in '" + name + "'");
    });
    if (!r.done())
        throw FormatError("trailing bytes after last tensor");
    return model;
}

void save_weights(const TransformerModel& model, const std::string& path)
{
    write_file(path, serialize_weights(model));
}

TransformerModel load_weights(const std::string& path)
{
    const auto bytes = read_file(path);
    return deserialize_weights(bytes);
}

std::uint64_t model_fingerprint(const TransformerModel& model)
{
    const auto bytes = serialize_weights(model);
    return fnv1a(bytes.data(), bytes.size());
}

}  // namespace specee
