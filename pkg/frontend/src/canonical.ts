/**
 * Canonical JSON: sorted object keys, no whitespace, raw unicode.
 *
 * This mirrors the executor's canonical encoding closely enough that two
 * batch files describing the same records serialize identically once both
 * sides pass through a canonicalization step (object key order and
 * whitespace are normalized here; number formatting is normalized by the
 * JSON round-trip).
 */

export function canonicalJson(value: unknown): string {
  if (value === null || typeof value === "boolean" || typeof value === "number") {
    return JSON.stringify(value);
  }
  if (typeof value === "string") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  if (typeof value === "object") {
    const record = value as Record<string, unknown>;
    const keys = Object.keys(record).sort();
    const parts = keys.map((k) => JSON.stringify(k) + ":" + canonicalJson(record[k]));
    return "{" + parts.join(",") + "}";
  }
  throw new TypeError(`cannot canonicalize a ${typeof value}`);
}

/** Parse a JSON-lines file body into canonicalized lines. */
export function canonicalizeLines(text: string): string[] {
  return text
    .split("\n")
    .map((line) => line.trim())
    .filter((line) => line.length > 0)
    .map((line) => canonicalJson(JSON.parse(line)));
}
