#include "cascade_detr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cdetr {

namespace {

constexpr char kMagic[8] = {'C', 'D', 'E', 'T', 'R', 'C', 'K', 'P'};

template <typename T>
void put_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::filesystem::path& path) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
        throw Error(ErrorCode::checkpoint, path.string() + ": truncated checkpoint");
    }
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
    return value;
}

std::string shape_text(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape(const std::string& text, const std::filesystem::path& path) {
    Shape s;
    std::stringstream ss(text);
    std::string dim;
    while (std::getline(ss, dim, 'x')) {
        try {
            s.push_back(std::stoull(dim));
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::checkpoint, path.string() + ": bad shape '" + text + "'");
        }
    }
    return s;
}

struct Parsed {
    CheckpointInfo info;
    std::streampos payload = 0;
};

Parsed parse_header(std::istream& in, const std::filesystem::path& path) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw Error(ErrorCode::checkpoint, path.string() + ": not a checkpoint file");
    }
    Parsed p;
    p.info.version = get_le<std::uint32_t>(in, path);
    if (p.info.version != kCheckpointVersion) {
        throw Error(ErrorCode::checkpoint, path.string() + ": unsupported checkpoint version " + std::to_string(p.info.version));
    }
    const auto length = get_le<std::uint64_t>(in, path);
    if (length > (1u << 26)) throw Error(ErrorCode::checkpoint, path.string() + ": implausible header length");
    std::string header(length, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(length))) {
        throw Error(ErrorCode::checkpoint, path.string() + ": truncated header");
    }
    std::map<std::string, std::string> config;
    std::stringstream lines(header);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(ErrorCode::checkpoint, path.string() + ": bad header line '" + line + "'");
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key.rfind("config.", 0) == 0) {
            config[key.substr(7)] = value;
        } else if (key.rfind("meta.", 0) == 0) {
            p.info.meta[key.substr(5)] = value;
        } else if (key == "param") {
            const auto space = value.find(' ');
            if (space == std::string::npos) throw Error(ErrorCode::checkpoint, path.string() + ": bad manifest entry '" + value + "'");
            p.info.manifest.emplace_back(value.substr(0, space), parse_shape(value.substr(space + 1), path));
        } else {
            throw Error(ErrorCode::checkpoint, path.string() + ": unknown header key '" + key + "'");
        }
    }
    try {
        p.info.config = ModelConfig::from_fields(config);
    } catch (const Error& e) {
        throw Error(ErrorCode::checkpoint, path.string() + ": " + e.what());
    }
    p.payload = in.tellg();
    return p;
}

void read_payload(std::istream& in, CascadeDetr& model, const CheckpointInfo& info, const std::filesystem::path& path) {
    for (const auto& [name, shape] : info.manifest) {
        auto values = model.parameter(name).mutable_data();
        for (double& v : values) v = std::bit_cast<double>(get_le<std::uint64_t>(in, path));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw Error(ErrorCode::checkpoint, path.string() + ": trailing bytes after payload");
    }
}

std::vector<std::string> manifest_differences(const CascadeDetr& model, const CheckpointInfo& info) {
    std::vector<std::string> diffs;
    std::map<std::string, Shape> stored(info.manifest.begin(), info.manifest.end());
    for (const Parameter& p : model.parameters()) {
        auto it = stored.find(p.name);
        if (it == stored.end()) {
            diffs.push_back("parameter " + p.name + " missing from checkpoint");
        } else if (it->second != p.value.shape()) {
            diffs.push_back("parameter " + p.name + " shape " + shape_text(it->second) + " vs model " + shape_text(p.value.shape()));
        }
        stored.erase(p.name);
    }
    for (const auto& [name, shape] : stored) diffs.push_back("parameter " + name + " not in model");
    return diffs;
}

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "; " : "") + items[i];
    return out;
}

}  // namespace

void save_checkpoint(const CascadeDetr& model, const std::filesystem::path& path, const std::map<std::string, std::string>& meta) {
    std::string header;
    for (const auto& [k, v] : model.config().fields()) header += "config." + k + "=" + v + "\n";
    for (const auto& [k, v] : meta) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw PreconditionError("checkpoint metadata keys and values must be single-line without '='");
        }
        header += "meta." + k + "=" + v + "\n";
    }
    for (const Parameter& p : model.parameters()) header += "param=" + p.name + " " + shape_text(p.value.shape()) + "\n";

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::io, "cannot write checkpoint " + tmp.string());
        out.write(kMagic, 8);
        put_le<std::uint32_t>(out, kCheckpointVersion);
        put_le<std::uint64_t>(out, header.size());
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        for (const Parameter& p : model.parameters())
            for (double v : p.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        if (!out) throw Error(ErrorCode::io, "failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
    return parse_header(in, path).info;
}

CascadeDetr load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
    const Parsed p = parse_header(in, path);
    CascadeDetr model(p.info.config);
    const auto diffs = manifest_differences(model, p.info);
    if (!diffs.empty()) throw Error(ErrorCode::checkpoint, path.string() + ": manifest mismatch: " + join(diffs));
    read_payload(in, model, p.info, path);
    return model;
}

void load_checkpoint_into(CascadeDetr& model, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
    const Parsed p = parse_header(in, path);
    std::vector<std::string> diffs = config_differences(model.config(), p.info.config);
    for (std::string& d : diffs) d = "config " + d;
    for (std::string& d : manifest_differences(model, p.info)) diffs.push_back(std::move(d));
    if (!diffs.empty()) throw Error(ErrorCode::checkpoint, path.string() + ": checkpoint does not match model: " + join(diffs));
    read_payload(in, model, p.info, path);
}

}  // namespace cdetr
