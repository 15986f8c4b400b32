#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "leakgan/error.hpp"
#include "leakgan/layers.hpp"

namespace leakgan {

/// Versioned container of named arrays plus a free-form metadata string
/// (JSON by convention). Values are stored as little-endian float64 so
/// float and double models round-trip exactly.
///
/// Layout: "LKGNCKPT" | u32 version | u64 meta_len | meta | u64 count |
/// count x (u32 name_len | name | 4 x u64 dims | prod(dims) x f64).
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    static constexpr char kMagic[8] = {'L', 'K', 'G', 'N', 'C', 'K', 'P', 'T'};

    struct Entry {
        std::array<std::uint64_t, 4> dims{};
        std::vector<double> values;
    };

    std::string metadata;
    std::map<std::string, Entry> entries;

    template <typename T>
    void put(const std::string& name, const Tensor<T>& t) {
        Entry e;
        for (std::size_t k = 0; k < 4; ++k) e.dims[k] = t.shape()[k];
        e.values.assign(t.values().begin(), t.values().end());
        entries[name] = std::move(e);
    }

    template <typename T>
    void put_all(const std::vector<Param<T>*>& params) {
        for (auto* p : params) put(p->name, p->value);
    }

    template <typename T>
    void put_all(const std::vector<Buffer<T>>& bufs) {
        for (const auto& b : bufs) put(b.name, *b.tensor);
    }

    bool contains(const std::string& name) const { return entries.count(name) > 0; }

    template <typename T>
    void get(const std::string& name, Tensor<T>& out) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw DataError("checkpoint: missing array '" + name + "'");
        const auto& e = it->second;
        for (std::size_t k = 0; k < 4; ++k) {
            if (e.dims[k] != out.shape()[k]) {
                throw DataError("checkpoint: shape mismatch for '" + name + "': expected " + out.shape_string());
            }
        }
        for (std::size_t k = 0; k < e.values.size(); ++k) out[k] = static_cast<T>(e.values[k]);
    }

    template <typename T>
    void get_all(const std::vector<Param<T>*>& params) const {
        for (auto* p : params) get(p->name, p->value);
    }

    template <typename T>
    void get_all(const std::vector<Buffer<T>>& bufs) const {
        for (const auto& b : bufs) get(b.name, *b.tensor);
    }

    /// Writes to `<path>.tmp` and renames over `path`.
    void save(const std::filesystem::path& path) const {
        const auto tmp = std::filesystem::path(path.string() + ".tmp");
        {
            std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
            if (!os) throw IoError("checkpoint: cannot open " + tmp.string() + " for writing");
            os.write(kMagic, sizeof kMagic);
            write_pod(os, kVersion);
            write_pod(os, static_cast<std::uint64_t>(metadata.size()));
            os.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
            write_pod(os, static_cast<std::uint64_t>(entries.size()));
            for (const auto& [name, e] : entries) {
                write_pod(os, static_cast<std::uint32_t>(name.size()));
                os.write(name.data(), static_cast<std::streamsize>(name.size()));
                for (auto d : e.dims) write_pod(os, d);
                os.write(reinterpret_cast<const char*>(e.values.data()),
                         static_cast<std::streamsize>(e.values.size() * sizeof(double)));
            }
            os.flush();
            if (!os) throw IoError("checkpoint: write failed for " + tmp.string());
        }
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec) throw IoError("checkpoint: rename to " + path.string() + " failed: " + ec.message());
    }

    static Checkpoint load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("checkpoint: cannot open " + path.string());
        Checkpoint ck;
        ck.metadata = read_header(is, path);
        const auto count = read_pod<std::uint64_t>(is);
        for (std::uint64_t i = 0; i < count; ++i) {
            const auto len = read_pod<std::uint32_t>(is);
            std::string name(len, '\0');
            is.read(name.data(), len);
            Entry e;
            std::uint64_t total = 1;
            for (auto& d : e.dims) {
                d = read_pod<std::uint64_t>(is);
                total *= d;
            }
            e.values.resize(total);
            is.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(total * sizeof(double)));
            if (!is) throw DataError("checkpoint: truncated file " + path.string());
            ck.entries.emplace(std::move(name), std::move(e));
        }
        return ck;
    }

    /// Metadata string alone; the arrays are not read.
    static std::string load_metadata(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("checkpoint: cannot open " + path.string());
        return read_header(is, path);
    }

private:
    static std::string read_header(std::istream& is, const std::filesystem::path& path) {
        char magic[8];
        is.read(magic, sizeof magic);
        if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) {
            throw DataError("checkpoint: " + path.string() + " is not a checkpoint file");
        }
        const auto version = read_pod<std::uint32_t>(is);
        if (version != kVersion) {
            throw DataError("checkpoint: unsupported version " + std::to_string(version));
        }
        const auto meta_len = read_pod<std::uint64_t>(is);
        std::string metadata(meta_len, '\0');
        is.read(metadata.data(), static_cast<std::streamsize>(meta_len));
        if (!is) throw DataError("checkpoint: truncated metadata in " + path.string());
        return metadata;
    }

    template <typename P>
    static void write_pod(std::ostream& os, P v) {
        os.write(reinterpret_cast<const char*>(&v), sizeof v);
    }

    template <typename P>
    static P read_pod(std::istream& is) {
        P v{};
        is.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!is) throw DataError("checkpoint: truncated header");
        return v;
    }
};

}  // namespace leakgan
