// Byte transports: the cockpit logic only sees a duplex byte stream.  Node
// connects straight to the service's TCP port; a browser needs a byte-level
// WebSocket-to-TCP forwarder in front of the same port.

export interface ByteStream {
  send(bytes: Uint8Array): void;
  close(): void;
}

export interface StreamHandlers {
  onData(chunk: Uint8Array): void;
  onClose(): void;
}

export async function connectTcp(host: string, port: number,
                                 handlers: StreamHandlers): Promise<ByteStream> {
  const net = await import("node:net");
  const socket = net.createConnection({ host, port });
  await new Promise<void>((resolve, reject) => {
    socket.once("connect", resolve);
    socket.once("error", reject);
  });
  socket.on("data", (chunk: Buffer) => handlers.onData(new Uint8Array(chunk)));
  socket.on("close", () => handlers.onClose());
  socket.on("error", () => handlers.onClose());
  return {
    send: (bytes) => socket.write(bytes),
    close: () => socket.destroy(),
  };
}

export function connectWebSocket(url: string,
                                 handlers: StreamHandlers): Promise<ByteStream> {
  return new Promise((resolve, reject) => {
    const ws = new WebSocket(url);
    ws.binaryType = "arraybuffer";
    ws.onopen = () => resolve({
      send: (bytes) => ws.send(bytes),
      close: () => ws.close(),
    });
    ws.onerror = (e) => reject(e);
    ws.onmessage = (e) => handlers.onData(new Uint8Array(e.data as ArrayBuffer));
    ws.onclose = () => handlers.onClose();
  });
}
