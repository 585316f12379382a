import { describe, expect, it } from "vitest";
import {
    Axis, Vec3, VolumeGeometry,
    indexToWorld, pixelToWorld, sliceGeometry, worldToIndex, worldToPixel,
} from "../src/geometry.js";

function rotZ(deg: number): number[][] {
    const a = (deg * Math.PI) / 180;
    const c = Math.cos(a), s = Math.sin(a);
    return [[c, -s, 0], [s, c, 0], [0, 0, 1]];
}

function rotX(deg: number): number[][] {
    const a = (deg * Math.PI) / 180;
    const c = Math.cos(a), s = Math.sin(a);
    return [[1, 0, 0], [0, c, -s], [0, s, c]];
}

function matmul(a: number[][], b: number[][]): number[][] {
    const out = [[0, 0, 0], [0, 0, 0], [0, 0, 0]];
    for (let i = 0; i < 3; i++)
        for (let j = 0; j < 3; j++)
            for (let k = 0; k < 3; k++) out[i][j] += a[i][k] * b[k][j];
    return out;
}

// Rotated, anisotropic, offset grid: nothing cancels by accident.
const OBLIQUE: VolumeGeometry = {
    dims: [40, 32, 24],
    spacing: [0.8, 1.1, 2.5],
    origin: [-31.2, 12.5, -64.0],
    direction: matmul(rotZ(30), rotX(20)),
};

const IDENTITY: VolumeGeometry = {
    dims: [32, 32, 32],
    spacing: [1, 1, 1],
    origin: [0, 0, 0],
    direction: [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
};

const AXES: Axis[] = ["axial", "coronal", "sagittal"];

describe("pixel to world round trips", () => {
    it("is identity well under half a pixel on all three axes", () => {
        for (const axis of AXES) {
            const g = sliceGeometry(OBLIQUE, axis, 7);
            const samples: Array<[number, number]> = [
                [0, 0], [3.25, 7.5], [g.rows - 1, g.cols - 1], [11.8, 0.4],
            ];
            for (const [r, c] of samples) {
                const p = pixelToWorld(g, r, c);
                const back = worldToPixel(g, p);
                expect(Math.abs(back.row - r)).toBeLessThan(0.5);
                expect(Math.abs(back.col - c)).toBeLessThan(0.5);
                expect(Math.abs(back.row - r)).toBeLessThan(1e-9);
                expect(Math.abs(back.col - c)).toBeLessThan(1e-9);
                expect(Math.abs(back.offPlane)).toBeLessThan(1e-9);
            }
        }
    });

    it("survives 100 random pixels per axis", () => {
        let seed = 12345;
        const rand = () => {
            seed = (seed * 1103515245 + 12345) % 2147483648;
            return seed / 2147483648;
        };
        for (const axis of AXES) {
            const g = sliceGeometry(OBLIQUE, axis, 3);
            for (let n = 0; n < 100; n++) {
                const r = rand() * (g.rows - 1);
                const c = rand() * (g.cols - 1);
                const back = worldToPixel(g, pixelToWorld(g, r, c));
                expect(Math.abs(back.row - r)).toBeLessThan(1e-9);
                expect(Math.abs(back.col - c)).toBeLessThan(1e-9);
            }
        }
    });
});

describe("voxel center cross-checks", () => {
    it("axial pixel (r, c) is voxel (c, r, k)", () => {
        const g = sliceGeometry(OBLIQUE, "axial", 5);
        const p = pixelToWorld(g, 9, 4);
        const expected = indexToWorld(OBLIQUE, [4, 9, 5]);
        for (let i = 0; i < 3; i++) expect(p[i]).toBeCloseTo(expected[i], 10);
    });

    it("coronal pixel (r, c) is voxel (c, j, r)", () => {
        const g = sliceGeometry(OBLIQUE, "coronal", 6);
        const p = pixelToWorld(g, 10, 3);
        const expected = indexToWorld(OBLIQUE, [3, 6, 10]);
        for (let i = 0; i < 3; i++) expect(p[i]).toBeCloseTo(expected[i], 10);
    });

    it("sagittal pixel (r, c) is voxel (i, c, r)", () => {
        const g = sliceGeometry(OBLIQUE, "sagittal", 8);
        const p = pixelToWorld(g, 13, 2);
        const expected = indexToWorld(OBLIQUE, [8, 2, 13]);
        for (let i = 0; i < 3; i++) expect(p[i]).toBeCloseTo(expected[i], 10);
    });
});

describe("scales and offsets", () => {
    it("moves 10 mm for a 10 px drag at 1 mm/px", () => {
        const g = sliceGeometry(IDENTITY, "axial", 0);
        const a = pixelToWorld(g, 5, 5);
        const b = pixelToWorld(g, 5, 15);
        expect(b[0] - a[0]).toBeCloseTo(10, 12);
        expect(b[1] - a[1]).toBeCloseTo(0, 12);
    });

    it("reports out-of-plane distance in mm", () => {
        const g = sliceGeometry(OBLIQUE, "axial", 4);
        const p = indexToWorld(OBLIQUE, [2, 3, 6]);
        const px = worldToPixel(g, p);
        expect(px.offPlane).toBeCloseTo(2 * OBLIQUE.spacing[2], 9);
        expect(px.row).toBeCloseTo(3, 9);
        expect(px.col).toBeCloseTo(2, 9);
    });

    it("inverts indexToWorld", () => {
        const idx: Vec3 = [11, 7.5, 3.25];
        const back = worldToIndex(OBLIQUE, indexToWorld(OBLIQUE, idx));
        for (let i = 0; i < 3; i++) expect(back[i]).toBeCloseTo(idx[i], 10);
    });
});

describe("validation", () => {
    it("rejects out-of-range slice indices", () => {
        expect(() => sliceGeometry(OBLIQUE, "axial", 24)).toThrow(RangeError);
        expect(() => sliceGeometry(OBLIQUE, "axial", -1)).toThrow(RangeError);
        expect(() => sliceGeometry(OBLIQUE, "coronal", 32)).toThrow(RangeError);
    });

    it("rejects unknown axes", () => {
        expect(() => sliceGeometry(OBLIQUE, "oblique" as Axis, 0)).toThrow();
    });
});
