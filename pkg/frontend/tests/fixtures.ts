import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

const here = dirname(fileURLToPath(import.meta.url));

export function fixture(name: string): Uint8Array {
  return new Uint8Array(readFileSync(join(here, "..", "fixtures", name)));
}

export function fixtureJson(name: string): any {
  return JSON.parse(readFileSync(join(here, "..", "fixtures", name), "utf-8"));
}
