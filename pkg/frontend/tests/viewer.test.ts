import { describe, expect, it } from "vitest";
import { FetchLike, SessionClient } from "../src/api.js";
import { Vec3, VolumeGeometry, sliceGeometry, worldToPixel } from "../src/geometry.js";
import { SliceController, ViewerState, planOverlay } from "../src/viewer.js";

const VOL: VolumeGeometry = {
    dims: [32, 32, 32],
    spacing: [1, 1, 1],
    origin: [0, 0, 0],
    direction: [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
};

const ASYM: VolumeGeometry = { ...VOL, dims: [40, 32, 24] };

function loadedState(): ViewerState {
    const state = new ViewerState();
    state.volumes = { interventional: VOL, comp_pet: VOL };
    state.axis = "axial";
    state.index = 10;
    return state;
}

function stubClient(respond: (url: string, body: any) => [number, unknown]) {
    const calls: Array<{ url: string; body: any }> = [];
    const fetch: FetchLike = async (url, init) => {
        const body = init?.body ? JSON.parse(init.body as string) : undefined;
        calls.push({ url, body });
        const [status, payload] = respond(url, body);
        return new Response(JSON.stringify(payload), { status });
    };
    return { client: new SessionClient("", fetch), calls };
}

const echoPlan = (url: string, body: any): [number, unknown] =>
    [200, { entry: body.entry, target: body.target, direction: [1, 0, 0], length: 10 }];

describe("plan overlay", () => {
    it("draws an in-plane plan as one bright segment at the mapped pixels", () => {
        const g = sliceGeometry(VOL, "axial", 10);
        const entry: Vec3 = [2, 3, 10];
        const target: Vec3 = [20, 15, 10];
        const ov = planOverlay(g, entry, target);
        expect(ov.segments).toHaveLength(1);
        expect(ov.segments[0].dim).toBe(false);
        const e = worldToPixel(g, entry);
        const t = worldToPixel(g, target);
        expect(ov.segments[0].a.row).toBeCloseTo(e.row, 9);
        expect(ov.segments[0].a.col).toBeCloseTo(e.col, 9);
        expect(ov.segments[0].b.row).toBeCloseTo(t.row, 9);
        expect(ov.segments[0].b.col).toBeCloseTo(t.col, 9);
        expect(ov.entry.dim).toBe(false);
        expect(ov.target.dim).toBe(false);
        expect(ov.crossing).toBeNull();
    });

    it("collapses a perpendicular plan to a single crossing marker", () => {
        const g = sliceGeometry(VOL, "axial", 10);
        const ov = planOverlay(g, [5, 7, 2], [5, 7, 25]);
        expect(ov.segments).toHaveLength(0);
        expect(ov.crossing).not.toBeNull();
        expect(ov.crossing!.row).toBeCloseTo(7, 9);
        expect(ov.crossing!.col).toBeCloseTo(5, 9);
        expect(ov.entry.dim).toBe(true);
        expect(ov.target.dim).toBe(true);
    });

    it("shows no crossing on slices the perpendicular plan never reaches", () => {
        const g = sliceGeometry(VOL, "axial", 30);
        const ov = planOverlay(g, [5, 7, 2], [5, 7, 25]);
        expect(ov.segments).toHaveLength(0);
        expect(ov.crossing).toBeNull();
    });

    it("splits an oblique plan into dim, bright, dim pieces", () => {
        const g = sliceGeometry(VOL, "axial", 10);
        const ov = planOverlay(g, [2, 2, 6], [26, 26, 14]);
        expect(ov.segments.map((s) => s.dim)).toEqual([true, false, true]);
        expect(ov.crossing).toBeNull();
    });

    it("dims the whole segment when the plan lies a slab away", () => {
        const g = sliceGeometry(VOL, "axial", 10);
        const ov = planOverlay(g, [2, 3, 14], [20, 15, 14]);
        expect(ov.segments).toHaveLength(1);
        expect(ov.segments[0].dim).toBe(true);
        expect(ov.entry.dim).toBe(true);
    });
});

describe("viewer state", () => {
    it("clamps opacity into [0, 1]", () => {
        const state = new ViewerState();
        state.opacity = 1.7;
        expect(state.opacity).toBe(1);
        state.opacity = -3;
        expect(state.opacity).toBe(0);
    });

    it("clamps the slice index to the active axis extent", () => {
        const state = new ViewerState();
        state.volumes = { interventional: ASYM };
        state.setIndex(99);
        expect(state.index).toBe(23);
        state.setAxis("coronal");
        state.setIndex(99);
        expect(state.index).toBe(31);
        state.setAxis("sagittal");
        state.setIndex(-5);
        expect(state.index).toBe(0);
    });
});

describe("pixel picking", () => {
    it("stays inert before volumes are loaded", async () => {
        const { client, calls } = stubClient(echoPlan);
        const ctl = new SliceController(new ViewerState(), client);
        expect(await ctl.pick(4, 4)).toBeNull();
        expect(calls).toHaveLength(0);
    });

    it("posts the plan once both points are picked, in world mm", async () => {
        const { client, calls } = stubClient(echoPlan);
        const state = loadedState();
        const ctl = new SliceController(state, client);
        await ctl.pick(3, 2);
        expect(calls).toHaveLength(0);
        state.pickMode = "target";
        await ctl.pick(15, 20);
        expect(calls).toHaveLength(1);
        expect(calls[0].url).toBe("/session/plan");
        expect(calls[0].body.entry).toEqual([2, 3, 10]);
        expect(calls[0].body.target).toEqual([20, 15, 10]);
    });

    it("routes fiducial picks to /session/fiducial", async () => {
        const { client, calls } = stubClient(() => [200, { pairs: 1, rmse: null, complete: false }]);
        const state = loadedState();
        state.pickMode = "fiducial";
        const ctl = new SliceController(state, client);
        await ctl.pick(9, 4);
        expect(calls[0].url).toBe("/session/fiducial");
        expect(calls[0].body.image_point).toEqual([4, 9, 10]);
        expect(state.pendingFiducial).toBeNull();
        expect(state.lastError).toBeNull();
    });

    it("surfaces validation errors inline instead of throwing", async () => {
        const { client, calls } = stubClient(() => [422, { detail: "plan is degenerate" }]);
        const state = loadedState();
        state.entry = [1, 1, 10];
        const ctl = new SliceController(state, client);
        state.pickMode = "target";
        await ctl.pick(1, 1);
        expect(calls).toHaveLength(1);
        expect(state.lastError).toBe("plan is degenerate");
    });
});

describe("entry dragging", () => {
    it("updates the server plan in one request round trip", async () => {
        const { client, calls } = stubClient(echoPlan);
        const state = loadedState();
        state.entry = [5, 9, 10];
        state.target = [20, 9, 10];
        const ctl = new SliceController(state, client);
        const plan = await ctl.dragEntry(9, 15);
        expect(calls).toHaveLength(1);
        expect(calls[0].url).toBe("/session/plan");
        expect(calls[0].body.entry).toEqual([15, 9, 10]);
        expect(plan!.entry).toEqual([15, 9, 10]);
        expect(state.entry).toEqual([15, 9, 10]);
        expect(state.target).toEqual([20, 9, 10]);
    });

    it("moves the entry 10 mm for a 10 px drag at 1 mm/px", async () => {
        const { client, calls } = stubClient(echoPlan);
        const state = loadedState();
        state.entry = [5, 9, 10];
        state.target = [20, 9, 10];
        const ctl = new SliceController(state, client);
        await ctl.dragEntry(9, 5);
        await ctl.dragEntry(9, 15);
        expect(calls[1].body.entry[0] - calls[0].body.entry[0]).toBeCloseTo(10, 12);
    });

    it("ignores drags while no target exists", async () => {
        const { client, calls } = stubClient(echoPlan);
        const ctl = new SliceController(loadedState(), client);
        expect(await ctl.dragEntry(4, 4)).toBeNull();
        expect(calls).toHaveLength(0);
    });
});

describe("crosshair jump", () => {
    it("moves the slice index to the tip position", () => {
        const { client } = stubClient(echoPlan);
        const state = loadedState();
        const ctl = new SliceController(state, client);
        ctl.jumpTo([4, 9, 22]);
        expect(state.index).toBe(22);
        state.setAxis("sagittal");
        ctl.jumpTo([4, 9, 22]);
        expect(state.index).toBe(4);
    });
});
