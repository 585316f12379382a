// Pixel <-> millimeter mapping for served slice images.
//
// The server renders slice (axis, index) so that pixel (row, col) center
// sits at origin + row * rowStep + col * colStep in world mm.  The grid
// metadata needed to rebuild that mapping comes from GET /session.

export type Vec3 = [number, number, number];

export interface VolumeGeometry {
    dims: number[];
    spacing: number[];
    origin: number[];
    direction: number[][];
}

export type Axis = "axial" | "coronal" | "sagittal";

export interface SliceGeometry {
    origin: Vec3;
    rowStep: Vec3;
    colStep: Vec3;
    sliceStep: Vec3;
    rows: number;
    cols: number;
    axisIndex: number;
    thickness: number;
}

export interface SlicePixel {
    row: number;
    col: number;
    offPlane: number;
}

const SLICE_AXES: Record<Axis, { ax: number; rowAx: number; colAx: number }> = {
    axial: { ax: 2, rowAx: 1, colAx: 0 },
    coronal: { ax: 1, rowAx: 2, colAx: 0 },
    sagittal: { ax: 0, rowAx: 2, colAx: 1 },
};

export function vadd(a: Vec3, b: Vec3): Vec3 {
    return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function vsub(a: Vec3, b: Vec3): Vec3 {
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function vscale(a: Vec3, s: number): Vec3 {
    return [a[0] * s, a[1] * s, a[2] * s];
}

export function vdot(a: Vec3, b: Vec3): number {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

export function vcross(a: Vec3, b: Vec3): Vec3 {
    return [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
}

export function vnorm(a: Vec3): number {
    return Math.sqrt(vdot(a, a));
}

function axisColumn(vol: VolumeGeometry, axis: number): Vec3 {
    const s = vol.spacing[axis];
    return [
        vol.direction[0][axis] * s,
        vol.direction[1][axis] * s,
        vol.direction[2][axis] * s,
    ];
}

export function indexToWorld(vol: VolumeGeometry, idx: Vec3): Vec3 {
    let p: Vec3 = [vol.origin[0], vol.origin[1], vol.origin[2]];
    for (let axis = 0; axis < 3; axis++) {
        p = vadd(p, vscale(axisColumn(vol, axis), idx[axis]));
    }
    return p;
}

export function worldToIndex(vol: VolumeGeometry, p: Vec3): Vec3 {
    const d = vsub(p, [vol.origin[0], vol.origin[1], vol.origin[2]]);
    return solveColumns(axisColumn(vol, 0), axisColumn(vol, 1), axisColumn(vol, 2), d);
}

// Solve [A B C] x = d exactly for a 3x3 column matrix via cross products.
function solveColumns(a: Vec3, b: Vec3, c: Vec3, d: Vec3): Vec3 {
    const det = vdot(a, vcross(b, c));
    if (Math.abs(det) < 1e-12) {
        throw new Error("degenerate volume direction matrix");
    }
    return [
        vdot(d, vcross(b, c)) / det,
        vdot(d, vcross(c, a)) / det,
        vdot(d, vcross(a, b)) / det,
    ];
}

export function sliceGeometry(vol: VolumeGeometry, axis: Axis, index: number): SliceGeometry {
    const m = SLICE_AXES[axis];
    if (!m) {
        throw new Error(`unknown axis ${axis}`);
    }
    if (index < 0 || index >= vol.dims[m.ax]) {
        throw new RangeError(`slice index ${index} out of range for ${axis}`);
    }
    const base: Vec3 = [0, 0, 0];
    base[m.ax] = index;
    return {
        origin: indexToWorld(vol, base),
        rowStep: axisColumn(vol, m.rowAx),
        colStep: axisColumn(vol, m.colAx),
        sliceStep: axisColumn(vol, m.ax),
        rows: vol.dims[m.rowAx],
        cols: vol.dims[m.colAx],
        axisIndex: m.ax,
        thickness: vol.spacing[m.ax],
    };
}

export function pixelToWorld(g: SliceGeometry, row: number, col: number): Vec3 {
    return vadd(g.origin, vadd(vscale(g.rowStep, row), vscale(g.colStep, col)));
}

export function worldToPixel(g: SliceGeometry, p: Vec3): SlicePixel {
    const d = vsub(p, g.origin);
    const x = solveColumns(g.rowStep, g.colStep, g.sliceStep, d);
    return { row: x[0], col: x[1], offPlane: x[2] * vnorm(g.sliceStep) };
}
