#include "profed/checkpoint.hpp"

#include "profed/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace profed::harness {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using Kind = CheckpointError::Kind;
constexpr char kMagic[4] = {'P', 'F', 'C', 'K'};

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

template <class T>
void put_raw(std::vector<std::uint8_t>& out, const T& v)
{
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <class T>
    T read(const char* what)
    {
        T v;
        need(sizeof(T), what);
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void read_into(void* dst, std::size_t n, const char* what)
    {
        need(n, what);
        if (n) std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n, const char* what) const
    {
        if (bytes_.size() - pos_ < n)
            throw CheckpointError(Kind::Truncated, std::string("checkpoint truncated while reading ") + what);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

void Checkpoint::put(std::string name, std::vector<double> values)
{
    for (auto& [n, v] : arrays)
        if (n == name) {
            v = std::move(values);
            return;
        }
    arrays.emplace_back(std::move(name), std::move(values));
}

bool Checkpoint::has(const std::string& name) const
{
    for (const auto& a : arrays)
        if (a.first == name) return true;
    return false;
}

const std::vector<double>& Checkpoint::get(const std::string& name) const
{
    for (const auto& a : arrays)
        if (a.first == name) return a.second;
    throw CheckpointError(Kind::Schema, "checkpoint has no array named \"" + name + "\"");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck)
{
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_raw(out, ck.version);
    put_raw(out, ck.config_hash);
    put_raw(out, ck.next_round);
    put_raw(out, static_cast<std::uint32_t>(ck.arrays.size()));
    for (const auto& [name, values] : ck.arrays) {
        put_raw(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_raw(out, static_cast<std::uint64_t>(values.size()));
        const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
        out.insert(out.end(), p, p + values.size() * sizeof(double));
    }
    put_raw(out, fnv1a(out.data(), out.size()));
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, std::optional<std::uint64_t> expected_hash)
{
    Reader r(bytes);
    char magic[4];
    r.read_into(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(Kind::BadMagic, "not a checkpoint file (bad magic)");
    Checkpoint ck;
    ck.version = r.read<std::uint32_t>("version");
    if (ck.version != kCheckpointVersion)
        throw CheckpointError(Kind::Version, "checkpoint format version " + std::to_string(ck.version) +
                                                 " is not supported (expected " +
                                                 std::to_string(kCheckpointVersion) + ")");
    ck.config_hash = r.read<std::uint64_t>("config hash");
    ck.next_round = r.read<std::int32_t>("round index");
    const auto count = r.read<std::uint32_t>("array count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.read<std::uint32_t>("array name length");
        std::string name(len, '\0');
        r.read_into(name.data(), len, "array name");
        const auto n = r.read<std::uint64_t>("array length");
        if (n > bytes.size() / sizeof(double))
            throw CheckpointError(Kind::Truncated, "checkpoint truncated in array \"" + name + "\"");
        std::vector<double> values(n);
        r.read_into(values.data(), n * sizeof(double), "array values");
        ck.arrays.emplace_back(std::move(name), std::move(values));
    }
    const std::size_t body = r.pos();
    const auto sum = r.read<std::uint64_t>("checksum");
    if (sum != fnv1a(bytes.data(), body))
        throw CheckpointError(Kind::Truncated, "checkpoint checksum mismatch (corrupted or truncated file)");
    if (r.pos() != bytes.size()) throw CheckpointError(Kind::Schema, "trailing bytes after checkpoint data");
    if (expected_hash && *expected_hash != ck.config_hash) {
        std::ostringstream msg;
        msg << "checkpoint was written for a different configuration (hash " << std::hex << ck.config_hash
            << ", expected " << *expected_hash << ")";
        throw CheckpointError(Kind::HashMismatch, msg.str());
    }
    return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path)
{
    const std::vector<std::uint8_t> bytes = encode_checkpoint(ck);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::Io, "cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(Kind::Io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(Kind::Io, "cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes, expected_hash);
}

} // namespace profed::harness
