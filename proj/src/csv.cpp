#include "ppm/csv.hpp"

#include <fstream>
#include <sstream>

#include "ppm/common.hpp"

namespace ppm {

namespace {

// Splits raw CSV text into records of fields. Record numbers count data rows
// from 1 (the header is record 0) for error messages.
std::vector<std::vector<std::string>> parse_records(const std::string& text, const std::string& path) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> fields;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;

    const auto end_field = [&] {
        fields.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    const auto end_record = [&] {
        end_field();
        records.push_back(std::move(fields));
        fields.clear();
    };

    for (size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        switch (c) {
            case '"':
                if (field.empty() && !field_started)
                    in_quotes = true;
                else
                    field.push_back(c);
                field_started = true;
                break;
            case ',':
                end_field();
                break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') break;  // swallowed by the \n case
                end_record();
                break;
            case '\n':
                end_record();
                break;
            default:
                field.push_back(c);
                field_started = true;
                break;
        }
    }
    if (in_quotes)
        throw DataError(path + ": unterminated quoted field at record " + std::to_string(records.size()));
    if (field_started || !fields.empty()) end_record();
    return records;
}

}  // namespace

CsvTable csv_read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    auto records = parse_records(buf.str(), path);
    if (records.empty()) throw DataError(path + ": empty file");

    CsvTable table;
    table.header = std::move(records.front());
    const size_t width = table.header.size();
    for (size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != width)
            throw DataError(path + ": record " + std::to_string(r) + " has " +
                            std::to_string(records[r].size()) + " fields, header has " +
                            std::to_string(width));
        table.rows.push_back(std::move(records[r]));
    }
    return table;
}

std::string csv_quote(const std::string& field) {
    const bool needs = field.find_first_of(",\"\n\r") != std::string::npos;
    if (!needs) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

void csv_write_file(const std::string& path, const std::vector<std::string>& header,
                    const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << csv_quote(header[i]);
    out << "\n";
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_quote(row[i]);
        out << "\n";
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace ppm
