// Live guidance consumer.  One WebSocket, one state object, listeners
// notified after every change.  The socket factory is injectable so tests
// can drive the feed with scripted frames.

export const HISTORY_TICKS = 200;
export const DEFAULT_TICK_MS = 50;

export interface GuidanceTick {
    tip_image: number[];
    depth_remaining: number;
    lateral_deviation: number;
    angle_deviation: number;
    pose_age: number;
    valid: boolean;
    timestamp: number;
}

export type ConnectionStatus = "idle" | "connecting" | "open" | "reconnecting" | "closed";

export interface WebSocketLike {
    onopen: ((ev?: unknown) => void) | null;
    onmessage: ((ev: { data: string }) => void) | null;
    onclose: ((ev?: unknown) => void) | null;
    close(): void;
}

export type SocketFactory = (url: string) => WebSocketLike;

export class GuidancePanelState {
    latest: GuidanceTick | null = null;
    history: GuidanceTick[] = [];
    connection: ConnectionStatus = "idle";
    stale = false;
    gateMessage: string | null = null;

    // Ticks older than the latest are dropped, never reordered.
    push(tick: GuidanceTick): boolean {
        if (this.latest && tick.timestamp < this.latest.timestamp) {
            return false;
        }
        this.latest = tick;
        this.history.push(tick);
        if (this.history.length > HISTORY_TICKS) {
            this.history.splice(0, this.history.length - HISTORY_TICKS);
        }
        this.stale = !tick.valid;
        this.gateMessage = null;
        return true;
    }
}

export interface GuidanceFeedOptions {
    socketFactory?: SocketFactory;
    tickMs?: number;
    reconnectBaseMs?: number;
}

export class GuidanceFeed {
    readonly state = new GuidancePanelState();
    private socket: WebSocketLike | null = null;
    private listeners: Array<(s: GuidancePanelState) => void> = [];
    private watchdog: ReturnType<typeof setTimeout> | null = null;
    private reconnectTimer: ReturnType<typeof setTimeout> | null = null;
    private reconnectAttempts = 0;
    private closed = false;
    private factory: SocketFactory;
    private tickMs: number;
    private reconnectBaseMs: number;

    constructor(private url: string, opts: GuidanceFeedOptions = {}) {
        this.factory = opts.socketFactory ?? ((u) => new WebSocket(u) as unknown as WebSocketLike);
        this.tickMs = opts.tickMs ?? DEFAULT_TICK_MS;
        this.reconnectBaseMs = opts.reconnectBaseMs ?? 1000;
    }

    onChange(listener: (s: GuidancePanelState) => void) {
        this.listeners.push(listener);
    }

    connect() {
        if (this.socket || this.closed) return;
        if (this.state.connection !== "reconnecting") {
            this.state.connection = "connecting";
        }
        const ws = this.factory(this.url);
        this.socket = ws;
        ws.onopen = () => {
            this.reconnectAttempts = 0;
            this.state.connection = "open";
            this.notify();
        };
        ws.onmessage = (ev) => this.handleMessage(ev.data);
        ws.onclose = () => {
            this.socket = null;
            this.clearWatchdog();
            if (this.closed) {
                this.state.connection = "closed";
                this.notify();
                return;
            }
            // History survives the outage; only the banner state changes.
            this.state.connection = "reconnecting";
            this.state.stale = true;
            this.notify();
            this.scheduleReconnect();
        };
    }

    close() {
        this.closed = true;
        this.clearWatchdog();
        if (this.reconnectTimer) {
            clearTimeout(this.reconnectTimer);
            this.reconnectTimer = null;
        }
        if (this.socket) {
            this.socket.close();
            this.socket = null;
        }
        this.state.connection = "closed";
        this.notify();
    }

    private handleMessage(raw: string) {
        let payload: any;
        try {
            payload = JSON.parse(raw);
        } catch {
            return;
        }
        if (payload && typeof payload.error === "string") {
            this.state.gateMessage = payload.error;
            this.armWatchdog();
            this.notify();
            return;
        }
        const tick = payload as GuidanceTick;
        if (this.state.push(tick)) {
            this.armWatchdog();
            this.notify();
        }
    }

    // A silent stream is flagged stale after one missed tick.
    private armWatchdog() {
        this.clearWatchdog();
        this.watchdog = setTimeout(() => {
            this.state.stale = true;
            this.notify();
        }, this.tickMs);
    }

    private clearWatchdog() {
        if (this.watchdog) {
            clearTimeout(this.watchdog);
            this.watchdog = null;
        }
    }

    private scheduleReconnect() {
        const delay = Math.min(this.reconnectBaseMs * 2 ** this.reconnectAttempts, 30000);
        this.reconnectTimer = setTimeout(() => {
            this.reconnectTimer = null;
            this.reconnectAttempts++;
            this.connect();
        }, delay);
    }

    private notify() {
        for (const l of this.listeners) {
            l(this.state);
        }
    }
}
