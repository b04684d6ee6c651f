#pragma once

// RFC 4180 reader/writer. Quoted fields may contain the delimiter, doubled
// quotes and line breaks. Records end at LF or CRLF outside quotes.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace ttd::csv {

struct Row {
  std::vector<std::string> fields;
  std::size_t line = 0;  // 1-based line where the record starts
  std::string error;     // non-empty when the record is malformed

  [[nodiscard]] bool ok() const { return error.empty(); }
};

/// Splits `text` into records. Malformed records are returned with `error`
/// set rather than dropped, so callers can account for every row.
inline std::vector<Row> parse(std::string_view text, char delim = ',') {
  std::vector<Row> rows;
  std::size_t i = 0, line = 1;
  if (text.starts_with("\xef\xbb\xbf")) i = 3;
  while (i < text.size()) {
    Row row;
    row.line = line;
    std::string field;
    bool end_of_record = false;
    while (!end_of_record) {
      if (i < text.size() && text[i] == '"') {
        ++i;
        bool closed = false;
        while (i < text.size()) {
          const char c = text[i];
          if (c == '"') {
            if (i + 1 < text.size() && text[i + 1] == '"') {
              field += '"';
              i += 2;
              continue;
            }
            ++i;
            closed = true;
            break;
          }
          if (c == '\n') ++line;
          field += c;
          ++i;
        }
        if (!closed) {
          row.error = "unterminated quoted field";
          row.fields.push_back(std::move(field));
          rows.push_back(std::move(row));
          return rows;
        }
        // Anything between the closing quote and the next delimiter is a syntax error.
        while (i < text.size() && text[i] != delim && text[i] != '\n' && text[i] != '\r') {
          if (row.error.empty()) row.error = "unexpected character after closing quote";
          field += text[i++];
        }
      } else {
        while (i < text.size() && text[i] != delim && text[i] != '\n' && text[i] != '\r') field += text[i++];
      }
      row.fields.push_back(std::move(field));
      field.clear();
      if (i >= text.size()) {
        end_of_record = true;
      } else if (text[i] == delim) {
        ++i;
      } else {
        if (text[i] == '\r') ++i;
        if (i < text.size() && text[i] == '\n') ++i;
        ++line;
        end_of_record = true;
      }
    }
    const bool blank = row.fields.size() == 1 && row.fields[0].empty() && row.ok();
    if (!blank) rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string quote(std::string_view field, char delim = ',') {
  const bool needs = field.find_first_of(std::string{'"', '\n', '\r', delim}) != std::string_view::npos;
  if (!needs) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string format_row(const std::vector<std::string>& fields, char delim = ',') {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += delim;
    out += quote(fields[i], delim);
  }
  out += '\n';
  return out;
}

}  // namespace ttd::csv
