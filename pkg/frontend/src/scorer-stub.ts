/** Reference external patch scorer for the engine's binary wire protocol,
 * as a Node process on stdio - demonstrates plugging a JS/TS model runtime
 * into the segmentation engine.
 *
 *   node dist/scorer-stub.js --mode constant --value 0.7
 *   node dist/scorer-stub.js --mode echo --scale 1.5
 *
 * Frames are little-endian: handshake "PSCR"+u16 version; request
 * u64 id, u32 n, u32 patch_size, n*s*s*3 RGB bytes; response u64 id,
 * u32 n, u32 patch_size, n*s*s float32 probabilities.
 */

import { Buffer } from "node:buffer";
import process from "node:process";

const MAGIC = Buffer.from("PSCR", "ascii");
const VERSION = 1;

interface StubOptions {
  mode: "constant" | "echo";
  value: number;
  scale: number;
  offset: number;
  maxBatch: number;
}

function parseArgs(argv: string[]): StubOptions {
  const opts: StubOptions =
    { mode: "constant", value: 0.5, scale: 1.0, offset: 0.0, maxBatch: 32 };
  for (let i = 0; i < argv.length; i += 2) {
    const [flag, value] = [argv[i], argv[i + 1]];
    if (flag === "--mode") opts.mode = value as StubOptions["mode"];
    else if (flag === "--value") opts.value = Number(value);
    else if (flag === "--scale") opts.scale = Number(value);
    else if (flag === "--offset") opts.offset = Number(value);
    else if (flag === "--max-batch") opts.maxBatch = Number(value);
  }
  return opts;
}

function respond(opts: StubOptions, id: bigint, n: number, s: number,
                 payload: Buffer): Buffer {
  const header = Buffer.alloc(16);
  header.writeBigUInt64LE(id, 0);
  header.writeUInt32LE(n, 8);
  header.writeUInt32LE(s, 12);
  const probs = Buffer.alloc(n * s * s * 4);
  for (let i = 0; i < n * s * s; i++) {
    let value = opts.value;
    if (opts.mode === "echo") {
      const base = i * 3;
      const mean = (payload[base] + payload[base + 1] + payload[base + 2]) / 3;
      value = (mean / 255) * opts.scale + opts.offset;
    }
    probs.writeFloatLE(value, i * 4);
  }
  return Buffer.concat([header, probs]);
}

function main(): void {
  const opts = parseArgs(process.argv.slice(2));
  let buffer = Buffer.alloc(0);
  let shaken = false;

  process.stdin.on("data", (chunk: Buffer) => {
    buffer = Buffer.concat([buffer, chunk]);
    for (;;) {
      if (!shaken) {
        if (buffer.length < 6) return;
        const magic = buffer.subarray(0, 4);
        const version = buffer.readUInt16LE(4);
        buffer = buffer.subarray(6);
        if (!magic.equals(MAGIC) || version !== VERSION) {
          process.exit(1); // client reports the handshake failure
        }
        const reply = Buffer.alloc(8);
        MAGIC.copy(reply, 0);
        reply.writeUInt16LE(VERSION, 4);
        reply.writeUInt16LE(opts.maxBatch, 6);
        process.stdout.write(reply);
        shaken = true;
        continue;
      }
      if (buffer.length < 16) return;
      const id = buffer.readBigUInt64LE(0);
      const n = buffer.readUInt32LE(8);
      const s = buffer.readUInt32LE(12);
      const need = 16 + n * s * s * 3;
      if (buffer.length < need) return;
      const payload = buffer.subarray(16, need);
      buffer = buffer.subarray(need);
      process.stdout.write(respond(opts, id, n, s, payload));
    }
  });

  process.stdin.on("end", () => process.exit(0));
}

main();
