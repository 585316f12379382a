import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";
import {
    GuidanceFeed, GuidanceTick, HISTORY_TICKS, WebSocketLike,
} from "../src/guidance.js";
import { GuidancePanel } from "../src/panel.js";

class FakeSocket implements WebSocketLike {
    onopen: ((ev?: unknown) => void) | null = null;
    onmessage: ((ev: { data: string }) => void) | null = null;
    onclose: ((ev?: unknown) => void) | null = null;
    closedByClient = false;

    open() {
        this.onopen?.();
    }

    frame(payload: unknown) {
        this.onmessage?.({ data: JSON.stringify(payload) });
    }

    drop() {
        this.onclose?.();
    }

    close() {
        this.closedByClient = true;
    }
}

// Just enough document for GuidancePanel: createElement, appendChild, and
// the three properties the panel touches.
class FakeElement {
    children: FakeElement[] = [];
    textContent = "";
    className = "";
    hidden = false;

    constructor(readonly ownerDocument: { createElement(tag: string): FakeElement }) {}

    appendChild(child: FakeElement): FakeElement {
        this.children.push(child);
        return child;
    }
}

function fakeContainer(): HTMLElement {
    const doc = { createElement: () => new FakeElement(doc) };
    return new FakeElement(doc) as unknown as HTMLElement;
}

function tick(timestamp: number, depth: number, valid = true): GuidanceTick {
    return {
        tip_image: [10, 20, 30],
        depth_remaining: depth,
        lateral_deviation: 0.0,
        angle_deviation: 0.4,
        pose_age: 0.01,
        valid,
        timestamp,
    };
}

function makeFeed() {
    const sockets: FakeSocket[] = [];
    const feed = new GuidanceFeed("ws://nav/guidance", {
        socketFactory: () => {
            const s = new FakeSocket();
            sockets.push(s);
            return s;
        },
        tickMs: 50,
        reconnectBaseMs: 1000,
    });
    return { feed, sockets };
}

function makePanelFeed() {
    const { feed, sockets } = makeFeed();
    const panel = new GuidancePanel(fakeContainer());
    feed.onChange((s) => panel.render(s));
    return { feed, sockets, panel };
}

beforeEach(() => {
    vi.useFakeTimers();
});

afterEach(() => {
    vi.useRealTimers();
});

describe("scripted insertion display", () => {
    it("drives the depth readout monotonically down", () => {
        const { feed, sockets, panel } = makePanelFeed();
        const depths: number[] = [];
        feed.onChange((s) => {
            if (s.latest) depths.push(parseFloat(panel.depthEl.textContent!));
        });
        feed.connect();
        sockets[0].open();
        let depth = 36.0;
        for (let i = 0; i < 24; i++) {
            sockets[0].frame(tick(i * 0.05, depth));
            depth = Math.max(depth - 1.5, 0);
        }
        expect(depths).toHaveLength(24);
        for (let i = 1; i < depths.length; i++) {
            expect(depths[i]).toBeLessThanOrEqual(depths[i - 1]);
        }
        expect(feed.state.stale).toBe(false);
        expect(feed.state.connection).toBe("open");
    });

    it("renders a zero lateral deviation as 0.0", () => {
        const { feed, sockets, panel } = makePanelFeed();
        feed.connect();
        sockets[0].open();
        sockets[0].frame(tick(0, 25));
        expect(panel.lateralEl.textContent).toBe("0.0 mm");
        expect(panel.depthEl.textContent).toBe("25.0 mm");
        expect(panel.tipEl.textContent).toBe("10.0, 20.0, 30.0");
    });
});

describe("history ring", () => {
    it("keeps the last 200 ticks in timestamp order", () => {
        const { feed, sockets } = makeFeed();
        feed.connect();
        sockets[0].open();
        for (let i = 0; i < 250; i++) {
            sockets[0].frame(tick(i, 40 - i * 0.1));
        }
        const h = feed.state.history;
        expect(h).toHaveLength(HISTORY_TICKS);
        expect(h[0].timestamp).toBe(50);
        for (let i = 1; i < h.length; i++) {
            expect(h[i].timestamp).toBeGreaterThan(h[i - 1].timestamp);
        }
    });

    it("drops out-of-order ticks instead of reordering", () => {
        const { feed, sockets } = makeFeed();
        feed.connect();
        sockets[0].open();
        sockets[0].frame(tick(5, 30));
        sockets[0].frame(tick(4, 29));
        expect(feed.state.history).toHaveLength(1);
        expect(feed.state.latest!.timestamp).toBe(5);
        sockets[0].frame(tick(6, 28));
        expect(feed.state.history.map((t) => t.timestamp)).toEqual([5, 6]);
    });
});

describe("staleness", () => {
    it("flags an invalid tick immediately", () => {
        const { feed, sockets, panel } = makePanelFeed();
        feed.connect();
        sockets[0].open();
        sockets[0].frame(tick(0, 30));
        expect(panel.staleBanner.hidden).toBe(true);
        sockets[0].frame(tick(0.05, 30, false));
        expect(panel.staleBanner.hidden).toBe(false);
        sockets[0].frame(tick(0.10, 30, true));
        expect(panel.staleBanner.hidden).toBe(true);
    });

    it("raises the stale banner within one tick of stream silence", () => {
        const { feed, sockets, panel } = makePanelFeed();
        feed.connect();
        sockets[0].open();
        sockets[0].frame(tick(0, 30));
        vi.advanceTimersByTime(49);
        expect(panel.staleBanner.hidden).toBe(true);
        vi.advanceTimersByTime(1);
        expect(panel.staleBanner.hidden).toBe(false);
    });

    it("shows the gating reason sent in-band", () => {
        const { feed, sockets, panel } = makePanelFeed();
        feed.connect();
        sockets[0].open();
        sockets[0].frame({ error: "guidance requires PATIENT_REGISTRATION" });
        expect(panel.gateBanner.hidden).toBe(false);
        expect(panel.gateBanner.textContent).toContain("PATIENT_REGISTRATION");
        expect(feed.state.history).toHaveLength(0);
    });
});

describe("reconnect", () => {
    it("banners the outage, retains history, and reconnects with backoff", () => {
        const { feed, sockets, panel } = makePanelFeed();
        feed.connect();
        sockets[0].open();
        sockets[0].frame(tick(0, 30));
        sockets[0].frame(tick(0.05, 28));

        sockets[0].drop();
        expect(panel.reconnectBanner.hidden).toBe(false);
        expect(feed.state.connection).toBe("reconnecting");
        expect(feed.state.stale).toBe(true);
        expect(feed.state.history).toHaveLength(2);

        vi.advanceTimersByTime(1000);
        expect(sockets).toHaveLength(2);
        sockets[1].open();
        expect(feed.state.connection).toBe("open");
        expect(panel.reconnectBanner.hidden).toBe(true);
        sockets[1].frame(tick(0.10, 26));
        expect(feed.state.history).toHaveLength(3);
    });

    it("backs off exponentially across failed attempts", () => {
        const { feed, sockets } = makeFeed();
        feed.connect();
        sockets[0].open();
        sockets[0].drop();
        vi.advanceTimersByTime(1000);
        expect(sockets).toHaveLength(2);
        sockets[1].drop();
        vi.advanceTimersByTime(1999);
        expect(sockets).toHaveLength(2);
        vi.advanceTimersByTime(1);
        expect(sockets).toHaveLength(3);
    });

    it("stays closed after an explicit close", () => {
        const { feed, sockets } = makeFeed();
        feed.connect();
        sockets[0].open();
        feed.close();
        expect(sockets[0].closedByClient).toBe(true);
        expect(feed.state.connection).toBe("closed");
        vi.advanceTimersByTime(60000);
        expect(sockets).toHaveLength(1);
    });
});
