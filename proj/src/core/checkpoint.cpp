#include "physnet/autodiff.hpp"
#include "physnet/io.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace physnet::ad {

using nlohmann::json;

void save_parameters(const std::filesystem::path& path, const ParameterSet& params) {
    json header;
    header["format"] = "physnet.params";
    header["version"] = 1;
    header["dtype"] = "float64";
    header["byte_order"] = "little";
    json entries = json::object();
    std::size_t offset = 0;
    std::vector<double> flat;
    for (const auto& [name, p] : params) {
        if (numel(p.shape) != p.values.size()) {
            throw std::invalid_argument("save_parameters: '" + name + "' has inconsistent shape");
        }
        entries[name] = {{"shape", p.shape}, {"offset", offset}, {"count", p.values.size()}};
        offset += p.values.size() * sizeof(double);
        flat.insert(flat.end(), p.values.begin(), p.values.end());
    }
    header["params"] = std::move(entries);
    header["data_bytes"] = offset;

    std::string bytes = header.dump();
    bytes.push_back('\n');
    bytes += io::encode_le_doubles(flat);
    io::write_file(path, bytes);
}

ParameterSet load_parameters(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    const auto newline = bytes.find('\n');
    if (newline == std::string::npos) throw std::runtime_error("load_parameters: missing header in " + path.string());
    json header;
    try {
        header = json::parse(bytes.substr(0, newline));
    } catch (const json::exception& e) {
        throw std::runtime_error("load_parameters: bad header in " + path.string() + ": " + e.what());
    }
    if (header.value("format", "") != "physnet.params") {
        throw std::runtime_error("load_parameters: " + path.string() + " is not a parameter file");
    }
    const std::string_view data(bytes.data() + newline + 1, bytes.size() - newline - 1);
    const std::size_t data_bytes = header.at("data_bytes").get<std::size_t>();
    if (data.size() != data_bytes) {
        std::ostringstream os;
        os << "load_parameters: expected " << data_bytes << " data bytes, found " << data.size();
        throw std::runtime_error(os.str());
    }
    ParameterSet out;
    for (const auto& [name, e] : header.at("params").items()) {
        ParamTensor p;
        p.shape = e.at("shape").get<Shape>();
        const auto offset = e.at("offset").get<std::size_t>();
        const auto count = e.at("count").get<std::size_t>();
        if (numel(p.shape) != count || offset + count * sizeof(double) > data.size()) {
            throw std::runtime_error("load_parameters: entry '" + name + "' is out of range");
        }
        p.values = io::decode_le_doubles(data.substr(offset, count * sizeof(double)));
        out.emplace(name, std::move(p));
    }
    return out;
}

}  // namespace physnet::ad
