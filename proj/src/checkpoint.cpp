#include "decouple/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "decouple/error.hpp"
#include "decouple/random.hpp"

namespace decouple {

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'C', 'P', 'L', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(const std::string& data, std::string name) : data_(data), name_(std::move(name)) {}

    template <class T>
    T get() {
        if (at_ + sizeof(T) > data_.size()) {
            throw ValidationError("checkpoint " + name_ + ": truncated");
        }
        T value;
        std::memcpy(&value, data_.data() + at_, sizeof(T));
        at_ += sizeof(T);
        return value;
    }

    std::size_t remaining() const { return data_.size() - at_; }

private:
    const std::string& data_;
    std::string name_;
    std::size_t at_ = 0;
};

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) {
            throw IoError("failed writing " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

void save_checkpoint(const std::filesystem::path& path, const Parameters& params, std::uint64_t vocab_hash) {
    const auto& cfg = params.config();
    std::string out(kMagic.begin(), kMagic.end());
    put<std::uint32_t>(out, kCheckpointVersion);
    for (std::size_t v : {cfg.vocab_size, cfg.width, cfg.layers, cfg.heads, cfg.max_len, cfg.state_tags}) {
        put<std::uint64_t>(out, v);
    }
    put<std::uint8_t>(out, cfg.classification_head ? 1 : 0);
    put<std::uint8_t>(out, params.frozen() ? 1 : 0);
    put<std::uint64_t>(out, vocab_hash);
    put<std::uint64_t>(out, params.size());
    for (double w : params.values()) {
        put<double>(out, w);
    }
    write_file_atomic(path, out);
}

Parameters load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_vocab_hash) {
    const std::string data = read_all(path);
    const std::string name = path.string();
    if (data.size() < kMagic.size() || std::memcmp(data.data(), kMagic.data(), kMagic.size()) != 0) {
        throw ValidationError("checkpoint " + name + ": bad magic");
    }
    Reader r(data, name);
    for (std::size_t i = 0; i < kMagic.size(); ++i) {
        r.get<char>();
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw ValidationError("checkpoint " + name + ": version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    }
    ModelConfig cfg;
    cfg.vocab_size = r.get<std::uint64_t>();
    cfg.width = r.get<std::uint64_t>();
    cfg.layers = r.get<std::uint64_t>();
    cfg.heads = r.get<std::uint64_t>();
    cfg.max_len = r.get<std::uint64_t>();
    cfg.state_tags = r.get<std::uint64_t>();
    cfg.classification_head = r.get<std::uint8_t>() != 0;
    const bool frozen = r.get<std::uint8_t>() != 0;
    const auto vocab_hash = r.get<std::uint64_t>();
    if (vocab_hash != expected_vocab_hash) {
        throw ValidationError("checkpoint " + name + ": vocabulary hash mismatch");
    }
    const auto count = r.get<std::uint64_t>();
    Parameters params(cfg);
    if (count != params.size() || r.remaining() != count * sizeof(double)) {
        throw ValidationError("checkpoint " + name + ": weight count does not match its config");
    }
    auto w = params.mutable_values();
    for (std::size_t i = 0; i < count; ++i) {
        w[i] = r.get<double>();
    }
    if (frozen) {
        params.freeze();
    }
    return params;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
    const std::string data = read_all(path);
    return fnv1a(data.data(), data.size());
}

}  // namespace decouple
