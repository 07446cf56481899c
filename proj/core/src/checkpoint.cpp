#include "htcn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace htcn {
namespace {

constexpr char kMagic[8] = {'H', 'T', 'C', 'N', 'C', 'K', 'P', 'T'};

[[noreturn]] void ckpt_fail(const std::string& msg) {
    throw std::runtime_error("checkpoint: " + msg);
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const char* what) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) ckpt_fail(std::string("truncated file while reading ") + what);
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::ifstream& in, std::vector<double>& v, const char* what) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) ckpt_fail(std::string("truncated file while reading ") + what);
}

void write_string(std::ofstream& out, const std::string& s) {
    write_pod(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in, const char* what) {
    std::uint32_t len = 0;
    read_pod(in, len, what);
    if (len > (1u << 20)) ckpt_fail(std::string("implausible string length in ") + what);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) ckpt_fail(std::string("truncated file while reading ") + what);
    return s;
}

CheckpointInfo read_header(std::ifstream& in, const std::string& path) {
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        ckpt_fail("'" + path + "' is not a checkpoint file");
    }
    CheckpointInfo info;
    read_pod(in, info.version, "version");
    if (info.version != kCheckpointVersion) {
        ckpt_fail("unsupported format version " + std::to_string(info.version));
    }
    read_pod(in, info.config_hash, "config hash");
    read_pod(in, info.run_seed, "run seed");
    return info;
}

}  // namespace

void save_checkpoint(const std::string& path, const Detector& det, std::uint64_t config_hash,
                     std::uint64_t run_seed) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) ckpt_fail("cannot open '" + path + "' for writing");

    out.write(kMagic, sizeof kMagic);
    write_pod(out, kCheckpointVersion);
    write_pod(out, config_hash);
    write_pod(out, run_seed);

    const auto& entries = det.params().entries();
    write_pod(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
        write_string(out, name);
        const auto& shape = tensor.shape();
        write_pod(out, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) write_pod(out, static_cast<std::int32_t>(d));
        write_doubles(out, tensor.values());
    }

    const RandomProjectionPair& proj = det.projections();
    write_pod(out, static_cast<std::int32_t>(proj.r_context.shape()[0]));
    write_pod(out, static_cast<std::int32_t>(proj.r_instance.shape()[0]));
    write_pod(out, static_cast<std::int32_t>(proj.d_out));
    write_doubles(out, proj.r_context.values());
    write_doubles(out, proj.r_instance.values());

    out.flush();
    if (!out) ckpt_fail("write to '" + path + "' failed");
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) ckpt_fail("cannot open '" + path + "'");
    return read_header(in, path);
}

CheckpointInfo load_checkpoint(const std::string& path, Detector& det,
                               std::uint64_t expected_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) ckpt_fail("cannot open '" + path + "'");
    CheckpointInfo info = read_header(in, path);
    if (info.config_hash != expected_hash) {
        ckpt_fail("config hash mismatch: file has " + std::to_string(info.config_hash) +
                  ", expected " + std::to_string(expected_hash) +
                  " (the checkpoint was trained under a different configuration)");
    }

    std::uint32_t n_params = 0;
    read_pod(in, n_params, "parameter count");
    const auto& entries = det.params().entries();
    if (n_params != entries.size()) {
        ckpt_fail("parameter count mismatch: file has " + std::to_string(n_params) +
                  ", model has " + std::to_string(entries.size()));
    }

    // Insertion order is deterministic for a given configuration, and the
    // hash check above already pinned the configuration, so positional
    // comparison is exact rather than best-effort.
    for (const auto& [name, tensor] : entries) {
        std::string stored_name = read_string(in, "parameter name");
        if (stored_name != name) {
            ckpt_fail("parameter order mismatch: file has '" + stored_name + "', model expects '" +
                      name + "'");
        }
        std::uint32_t rank = 0;
        read_pod(in, rank, "parameter rank");
        const auto& shape = tensor.shape();
        if (rank != shape.size()) ckpt_fail("shape rank mismatch for '" + name + "'");
        for (std::size_t k = 0; k < shape.size(); ++k) {
            std::int32_t d = 0;
            read_pod(in, d, "parameter shape");
            if (d != shape[k]) ckpt_fail("shape mismatch for '" + name + "'");
        }
        std::vector<double> values(tensor.numel());
        read_doubles(in, values, name.c_str());
        Tensor mutable_copy = tensor;  // shares the underlying node
        mutable_copy.mutable_values() = std::move(values);
    }

    std::int32_t dc = 0, di = 0, dout = 0;
    read_pod(in, dc, "projection dims");
    read_pod(in, di, "projection dims");
    read_pod(in, dout, "projection dims");
    RandomProjectionPair& proj = det.projections();
    if (dc != proj.r_context.shape()[0] || di != proj.r_instance.shape()[0] ||
        dout != proj.d_out) {
        ckpt_fail("projection dimensions mismatch");
    }
    std::vector<double> rc(proj.r_context.numel()), ri(proj.r_instance.numel());
    read_doubles(in, rc, "context projection");
    read_doubles(in, ri, "instance projection");
    proj.r_context.mutable_values() = std::move(rc);
    proj.r_instance.mutable_values() = std::move(ri);

    char extra = 0;
    in.read(&extra, 1);
    if (!in.eof()) ckpt_fail("trailing bytes after checkpoint payload");
    return info;
}

}  // namespace htcn
