// Server-sent events over fetch streaming (EventSource cannot carry the
// Authorization header, a fetch reader can).

export interface ServerEvent {
  id?: string;
  event?: string;
  data: string;
}

/** Incremental parser for a text/event-stream byte stream. */
export class SSEParser {
  private buffer = "";

  feed(chunk: string): ServerEvent[] {
    this.buffer += chunk;
    const events: ServerEvent[] = [];
    let boundary = this.buffer.indexOf("\n\n");
    while (boundary >= 0) {
      const block = this.buffer.slice(0, boundary);
      this.buffer = this.buffer.slice(boundary + 2);
      const parsed = this.parseBlock(block);
      if (parsed) {
        events.push(parsed);
      }
      boundary = this.buffer.indexOf("\n\n");
    }
    return events;
  }

  private parseBlock(block: string): ServerEvent | null {
    const out: ServerEvent = { data: "" };
    const dataLines: string[] = [];
    for (const line of block.split("\n")) {
      if (line.startsWith(":")) {
        continue; // comment / keepalive
      }
      const colon = line.indexOf(":");
      if (colon < 0) {
        continue;
      }
      const field = line.slice(0, colon);
      const value = line.slice(colon + 1).replace(/^ /, "");
      if (field === "data") {
        dataLines.push(value);
      } else if (field === "id") {
        out.id = value;
      } else if (field === "event") {
        out.event = value;
      }
    }
    if (dataLines.length === 0) {
      return null;
    }
    out.data = dataLines.join("\n");
    return out;
  }
}

/** Read one SSE connection, invoking onEvent per parsed event. Resolves
 * when the stream ends; throws on HTTP errors (including 401). */
export async function readEventStream(
  url: string,
  headers: Record<string, string>,
  onEvent: (event: ServerEvent) => void,
  signal?: AbortSignal,
): Promise<void> {
  const response = await fetch(url, { headers, signal });
  if (response.status === 401) {
    throw new AuthError("bad or missing token");
  }
  if (!response.ok || !response.body) {
    throw new Error(`event stream failed: ${response.status}`);
  }
  const reader = response.body.getReader();
  const decoder = new TextDecoder();
  const parser = new SSEParser();
  for (;;) {
    const { done, value } = await reader.read();
    if (done) {
      return;
    }
    for (const event of parser.feed(decoder.decode(value, { stream: true }))) {
      onEvent(event);
    }
  }
}

export class AuthError extends Error {}
