// Browser entry point: wires the slice canvas, the control strip, and the
// guidance panel to one navigation session.

import { SessionClient, SessionSnapshot } from "./api.js";
import { Axis, worldToPixel } from "./geometry.js";
import { GuidanceFeed, GuidancePanelState } from "./guidance.js";
import { GuidancePanel } from "./panel.js";
import { PickMode, SliceController, ViewerState, planOverlay } from "./viewer.js";

const REFRESH_MS = 500;

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
}

class SliceCanvas {
    private ctx: CanvasRenderingContext2D;
    private image = new Image();
    private imageReady = false;
    private dragging = false;

    constructor(
        private canvas: HTMLCanvasElement,
        private state: ViewerState,
        private controller: SliceController,
        private feed: GuidanceFeed,
        private client: SessionClient,
    ) {
        this.ctx = canvas.getContext("2d")!;
        canvas.addEventListener("pointerdown", (ev) => this.onDown(ev));
        canvas.addEventListener("pointermove", (ev) => this.onMove(ev));
        canvas.addEventListener("pointerup", (ev) => this.onUp(ev));
    }

    refresh() {
        if (!this.state.loaded) return;
        const url = this.client.sliceUrl({
            volume: this.state.volume,
            axis: this.state.axis,
            index: this.state.index,
            window: this.state.window,
            level: this.state.level,
            overlay: this.state.overlay,
            opacity: this.state.opacity,
        });
        const img = new Image();
        img.onload = () => {
            this.image = img;
            this.imageReady = true;
            this.draw();
        };
        img.src = url;
    }

    draw() {
        if (!this.imageReady) return;
        const g = this.state.geometry();
        if (!g) return;
        const c = this.canvas;
        const scale = Math.min(c.width / this.image.width, c.height / this.image.height);
        this.ctx.clearRect(0, 0, c.width, c.height);
        this.ctx.imageSmoothingEnabled = false;
        this.ctx.drawImage(this.image, 0, 0, this.image.width * scale, this.image.height * scale);

        const toCanvas = (row: number, col: number): [number, number] =>
            [(col + 0.5) * scale, (row + 0.5) * scale];

        if (this.state.entry && this.state.target) {
            const ov = planOverlay(g, this.state.entry, this.state.target);
            for (const seg of ov.segments) {
                this.ctx.strokeStyle = seg.dim ? "rgba(120,180,255,0.3)" : "#7ab8ff";
                this.ctx.lineWidth = seg.dim ? 1 : 2;
                this.ctx.beginPath();
                this.ctx.moveTo(...toCanvas(seg.a.row, seg.a.col));
                this.ctx.lineTo(...toCanvas(seg.b.row, seg.b.col));
                this.ctx.stroke();
            }
            if (ov.crossing) {
                this.marker(toCanvas(ov.crossing.row, ov.crossing.col), "#7ab8ff", false);
            }
            this.marker(toCanvas(ov.entry.row, ov.entry.col), "#ffd24d", ov.entry.dim);
            this.marker(toCanvas(ov.target.row, ov.target.col), "#ff6b6b", ov.target.dim);
        }

        const tick = this.feed.state.latest;
        if (tick && tick.valid) {
            const tip = worldToPixel(g, [tick.tip_image[0], tick.tip_image[1], tick.tip_image[2]]);
            const dim = Math.abs(tip.offPlane) > g.thickness;
            const [x, y] = toCanvas(tip.row, tip.col);
            this.ctx.strokeStyle = dim ? "rgba(140,255,140,0.35)" : "#8cff8c";
            this.ctx.lineWidth = 1.5;
            this.ctx.beginPath();
            this.ctx.moveTo(x - 8, y);
            this.ctx.lineTo(x + 8, y);
            this.ctx.moveTo(x, y - 8);
            this.ctx.lineTo(x, y + 8);
            this.ctx.stroke();
        }
    }

    private marker([x, y]: [number, number], color: string, dim: boolean) {
        this.ctx.globalAlpha = dim ? 0.35 : 1.0;
        this.ctx.fillStyle = color;
        this.ctx.beginPath();
        this.ctx.arc(x, y, 4, 0, 2 * Math.PI);
        this.ctx.fill();
        this.ctx.globalAlpha = 1.0;
    }

    private toSlicePixel(ev: PointerEvent): { row: number; col: number } | null {
        if (!this.imageReady) return null;
        const rect = this.canvas.getBoundingClientRect();
        const scale = Math.min(this.canvas.width / this.image.width, this.canvas.height / this.image.height);
        const cx = ((ev.clientX - rect.left) / rect.width) * this.canvas.width;
        const cy = ((ev.clientY - rect.top) / rect.height) * this.canvas.height;
        return { row: cy / scale - 0.5, col: cx / scale - 0.5 };
    }

    private onDown(ev: PointerEvent) {
        const g = this.state.geometry();
        const px = this.toSlicePixel(ev);
        if (!g || !px || !this.state.entry) return;
        const e = worldToPixel(g, this.state.entry);
        if (Math.hypot(e.row - px.row, e.col - px.col) < 2) {
            this.dragging = true;
            this.canvas.setPointerCapture(ev.pointerId);
        }
    }

    private onMove(ev: PointerEvent) {
        if (!this.dragging) return;
        const px = this.toSlicePixel(ev);
        if (px) {
            void this.controller.dragEntry(px.row, px.col).then(() => this.draw());
        }
    }

    private onUp(ev: PointerEvent) {
        const px = this.toSlicePixel(ev);
        if (this.dragging) {
            this.dragging = false;
            this.canvas.releasePointerCapture(ev.pointerId);
            if (px) void this.controller.dragEntry(px.row, px.col).then(() => this.draw());
            return;
        }
        if (px) void this.controller.pick(px.row, px.col).then(() => this.draw());
    }
}

function main() {
    const client = new SessionClient("");
    const state = new ViewerState();
    const controller = new SliceController(state, client);
    const feed = new GuidanceFeed(client.guidanceUrl());
    const panel = new GuidancePanel(el("guidance-panel"));
    const view = new SliceCanvas(el<HTMLCanvasElement>("slice-canvas"), state, controller, feed, client);
    const status = el("status-line");
    const errorLine = el("error-line");

    feed.onChange((s: GuidancePanelState) => {
        panel.render(s);
        view.draw();
    });
    feed.connect();

    const applySnapshot = (snap: SessionSnapshot) => {
        state.volumes = snap.volumes;
        if (snap.plan) {
            state.entry = [snap.plan.entry[0], snap.plan.entry[1], snap.plan.entry[2]];
            state.target = [snap.plan.target[0], snap.plan.target[1], snap.plan.target[2]];
        }
        const parts = Object.entries(snap.steps).map(([k, v]) => `${k}:${v}`);
        status.textContent = parts.join("  ");
    };

    const refreshSession = () => {
        client.getSession().then(applySnapshot).catch(() => undefined);
    };

    el<HTMLButtonElement>("load-volumes").addEventListener("click", () => {
        const ct = el<HTMLInputElement>("path-ct").value;
        const pet = el<HTMLInputElement>("path-pet").value;
        const iv = el<HTMLInputElement>("path-iv").value;
        client.setVolumes(ct, pet, iv)
            .then((snap) => { applySnapshot(snap); state.setIndex(state.index); view.refresh(); })
            .catch((err) => { errorLine.textContent = String(err.message ?? err); });
    });

    el<HTMLButtonElement>("run-registration").addEventListener("click", () => {
        client.runRegistration("rigid")
            .then(() => { refreshSession(); view.refresh(); })
            .catch((err) => { errorLine.textContent = String(err.message ?? err); });
    });

    el<HTMLButtonElement>("connect-tracking").addEventListener("click", () => {
        const host = el<HTMLInputElement>("tracker-host").value || "127.0.0.1";
        const port = parseInt(el<HTMLInputElement>("tracker-port").value, 10) || 18944;
        client.connectTracking(host, port)
            .then(applySnapshot)
            .catch((err) => { errorLine.textContent = String(err.message ?? err); });
    });

    el<HTMLButtonElement>("skip-calibration").addEventListener("click", () => {
        client.skipCalibration()
            .then(applySnapshot)
            .catch((err) => { errorLine.textContent = String(err.message ?? err); });
    });

    el<HTMLSelectElement>("axis-select").addEventListener("change", (ev) => {
        state.setAxis((ev.target as HTMLSelectElement).value as Axis);
        view.refresh();
    });

    el<HTMLInputElement>("index-slider").addEventListener("input", (ev) => {
        state.setIndex(parseInt((ev.target as HTMLInputElement).value, 10));
        view.refresh();
    });

    el<HTMLInputElement>("opacity-slider").addEventListener("input", (ev) => {
        state.opacity = parseFloat((ev.target as HTMLInputElement).value);
        view.refresh();
    });

    for (const mode of ["entry", "target", "fiducial"] as PickMode[]) {
        el<HTMLInputElement>(`pick-${mode}`).addEventListener("change", () => {
            state.pickMode = mode;
        });
    }

    el<HTMLButtonElement>("jump-tip").addEventListener("click", () => {
        const tick = feed.state.latest;
        if (tick) {
            controller.jumpTo([tick.tip_image[0], tick.tip_image[1], tick.tip_image[2]]);
            el<HTMLInputElement>("index-slider").value = String(state.index);
            view.refresh();
        }
    });

    setInterval(() => {
        errorLine.textContent = state.lastError ?? errorLine.textContent;
        refreshSession();
    }, REFRESH_MS);
    refreshSession();
}

main();
