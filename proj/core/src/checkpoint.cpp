#include "mfl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mfl/error.hpp"

namespace mfl {

namespace {

constexpr char kMagic[] = "MFL1";

void write_f64_le(std::ofstream& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_f64_le(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StateError("save_checkpoint: cannot open '" + path + "'");

    nlohmann::json header;
    header["arch"] = ckpt.arch;
    header["step"] = ckpt.step;
    header["task"] = ckpt.task_index;
    header["seed"] = ckpt.seed;
    nlohmann::json entries = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const auto& p : ckpt.params) {
        nlohmann::json e;
        e["name"] = p.name;
        e["shape"] = p.tensor.shape();
        e["offset"] = offset;
        entries.push_back(std::move(e));
        offset += p.tensor.numel() * 8;
    }
    header["params"] = std::move(entries);
    header["data_bytes"] = offset;

    out.write(kMagic, 4);
    out.put('\n');
    const std::string line = header.dump();
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
    for (const auto& p : ckpt.params)
        for (const double v : p.tensor.data()) write_f64_le(out, v);
    if (!out) throw StateError("save_checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StateError("load_checkpoint: cannot open '" + path + "'");

    char magic[5] = {};
    in.read(magic, 4);
    char nl = 0;
    in.get(nl);
    if (!in || std::strncmp(magic, kMagic, 4) != 0 || nl != '\n')
        throw ValueError("load_checkpoint: '" + path + "' is not an MFL1 file");

    std::string line;
    if (!std::getline(in, line)) throw ValueError("load_checkpoint: missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("load_checkpoint: bad header: ") + e.what());
    }

    Checkpoint ckpt;
    ckpt.arch = header.at("arch").get<std::string>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.task_index = header.at("task").get<std::int64_t>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();

    for (const auto& e : header.at("params")) {
        const auto name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<Shape>();
        const auto n = shape_numel(shape);
        std::vector<double> data(static_cast<std::size_t>(n));
        for (auto& v : data) v = read_f64_le(in);
        if (!in) throw ValueError("load_checkpoint: truncated payload for '" + name + "'");
        ckpt.params.push_back({name, Tensor::from_data(shape, std::move(data))});
    }
    return ckpt;
}

}  // namespace mfl
