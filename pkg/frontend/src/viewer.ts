// Slice viewing state plus the interaction layer that turns pixel picks
// into session requests.  The plan overlay is computed here in pixel space;
// the base image itself always comes from GET /slice so windowing and
// fusion stay server-side.

import {
    Axis, SliceGeometry, Vec3, VolumeGeometry,
    pixelToWorld, sliceGeometry, worldToIndex, worldToPixel,
} from "./geometry.js";
import { ApiError, PlanResponse, SessionClient } from "./api.js";

export type PickMode = "entry" | "target" | "fiducial";

export class ViewerState {
    volume = "interventional";
    overlay: string | null = "comp_pet";
    axis: Axis = "axial";
    index = 0;
    window: number | null = null;
    level: number | null = null;
    pickMode: PickMode = "entry";
    entry: Vec3 | null = null;
    target: Vec3 | null = null;
    pendingFiducial: Vec3 | null = null;
    volumes: Record<string, VolumeGeometry> | null = null;
    lastError: string | null = null;

    private _opacity = 0.4;

    get opacity(): number {
        return this._opacity;
    }

    set opacity(value: number) {
        this._opacity = Math.min(1, Math.max(0, value));
    }

    get loaded(): boolean {
        return this.volumes !== null && this.volume in this.volumes;
    }

    activeVolume(): VolumeGeometry | null {
        return this.loaded ? this.volumes![this.volume] : null;
    }

    geometry(): SliceGeometry | null {
        const vol = this.activeVolume();
        if (!vol) return null;
        return sliceGeometry(vol, this.axis, this.index);
    }

    setIndex(index: number) {
        const vol = this.activeVolume();
        if (!vol) {
            this.index = 0;
            return;
        }
        const probe = sliceGeometry(vol, this.axis, 0);
        const n = vol.dims[probe.axisIndex];
        this.index = Math.min(n - 1, Math.max(0, Math.round(index)));
    }

    setAxis(axis: Axis) {
        this.axis = axis;
        this.setIndex(this.index);
    }
}

export interface OverlayMarker {
    row: number;
    col: number;
    offPlane: number;
    dim: boolean;
}

export interface OverlaySegment {
    a: { row: number; col: number };
    b: { row: number; col: number };
    dim: boolean;
}

export interface PlanOverlay {
    entry: OverlayMarker;
    target: OverlayMarker;
    segments: OverlaySegment[];
    crossing: { row: number; col: number } | null;
}

const S_EPS = 1e-9;

// Project the planned path onto a slice.  The in-slab part of the segment
// draws bright; parts further out of plane than one slice thickness draw
// dimmed.  A path crossing the plane nearly head-on collapses to a single
// crossing marker instead of a sub-pixel bright segment.
export function planOverlay(g: SliceGeometry, entry: Vec3, target: Vec3): PlanOverlay {
    const e = worldToPixel(g, entry);
    const t = worldToPixel(g, target);
    const thr = g.thickness;

    const pix = (s: number) => ({
        row: e.row + s * (t.row - e.row),
        col: e.col + s * (t.col - e.col),
    });

    let interval: [number, number] | null = null;
    const df = t.offPlane - e.offPlane;
    if (Math.abs(df) < S_EPS) {
        interval = Math.abs(e.offPlane) <= thr ? [0, 1] : null;
    } else {
        const sA = (-thr - e.offPlane) / df;
        const sB = (thr - e.offPlane) / df;
        const lo = Math.max(0, Math.min(sA, sB));
        const hi = Math.min(1, Math.max(sA, sB));
        interval = lo <= hi ? [lo, hi] : null;
    }

    const segments: OverlaySegment[] = [];
    let crossing: { row: number; col: number } | null = null;
    const pixelSpan = Math.hypot(t.row - e.row, t.col - e.col);

    if (interval === null) {
        if (pixelSpan > S_EPS) {
            segments.push({ a: pix(0), b: pix(1), dim: true });
        }
    } else {
        const [lo, hi] = interval;
        if (pixelSpan * lo > S_EPS) {
            segments.push({ a: pix(0), b: pix(lo), dim: true });
        }
        const brightSpan = pixelSpan * (hi - lo);
        if (brightSpan < 0.5) {
            crossing = pix((lo + hi) / 2);
        } else {
            segments.push({ a: pix(lo), b: pix(hi), dim: false });
        }
        if (pixelSpan * (1 - hi) > S_EPS) {
            segments.push({ a: pix(hi), b: pix(1), dim: true });
        }
    }

    return {
        entry: { row: e.row, col: e.col, offPlane: e.offPlane, dim: Math.abs(e.offPlane) > thr },
        target: { row: t.row, col: t.col, offPlane: t.offPlane, dim: Math.abs(t.offPlane) > thr },
        segments,
        crossing,
    };
}

export class SliceController {
    constructor(public state: ViewerState, private client: SessionClient) {}

    // Route a pixel pick by mode.  Inert until volumes are loaded.
    async pick(row: number, col: number): Promise<Vec3 | null> {
        const g = this.state.geometry();
        if (!g) return null;
        const world = pixelToWorld(g, row, col);
        if (this.state.pickMode === "fiducial") {
            this.state.pendingFiducial = world;
            try {
                await this.client.addFiducial([...world]);
                this.state.pendingFiducial = null;
                this.state.lastError = null;
            } catch (err) {
                this.surface(err);
            }
            return world;
        }
        if (this.state.pickMode === "entry") {
            this.state.entry = world;
        } else {
            this.state.target = world;
        }
        if (this.state.entry && this.state.target) {
            await this.postPlan();
        }
        return world;
    }

    // One request per drag position; the server echo becomes local truth.
    async dragEntry(row: number, col: number): Promise<PlanResponse | null> {
        const g = this.state.geometry();
        if (!g || !this.state.target) return null;
        this.state.entry = pixelToWorld(g, row, col);
        return this.postPlan();
    }

    jumpTo(world: Vec3) {
        const vol = this.state.activeVolume();
        const g = this.state.geometry();
        if (!vol || !g) return;
        const idx = worldToIndex(vol, world);
        this.state.setIndex(idx[g.axisIndex]);
    }

    private async postPlan(): Promise<PlanResponse | null> {
        const { entry, target } = this.state;
        if (!entry || !target) return null;
        try {
            const plan = await this.client.setPlan([...entry], [...target]);
            this.state.entry = [plan.entry[0], plan.entry[1], plan.entry[2]];
            this.state.target = [plan.target[0], plan.target[1], plan.target[2]];
            this.state.lastError = null;
            return plan;
        } catch (err) {
            this.surface(err);
            return null;
        }
    }

    private surface(err: unknown) {
        if (err instanceof ApiError) {
            this.state.lastError = err.message;
        } else {
            this.state.lastError = String(err);
        }
    }
}
