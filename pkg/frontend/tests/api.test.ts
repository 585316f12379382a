import { describe, expect, it } from "vitest";
import { ApiError, FetchLike, SessionClient } from "../src/api.js";

interface RecordedCall {
    url: string;
    method: string;
    body: any;
}

function recordingFetch(respond: (url: string) => [number, unknown]): { fetch: FetchLike; calls: RecordedCall[] } {
    const calls: RecordedCall[] = [];
    const fetch: FetchLike = async (url, init) => {
        calls.push({
            url,
            method: init?.method ?? "GET",
            body: init?.body ? JSON.parse(init.body as string) : undefined,
        });
        const [status, payload] = respond(url);
        return new Response(JSON.stringify(payload), {
            status,
            headers: { "Content-Type": "application/json" },
        });
    };
    return { fetch, calls };
}

describe("request shapes", () => {
    it("posts the plan body the service expects", async () => {
        const { fetch, calls } = recordingFetch(() => [200, { entry: [1, 2, 3], target: [4, 5, 6], direction: [1, 0, 0], length: 5 }]);
        const client = new SessionClient("http://nav", fetch);
        const plan = await client.setPlan([1, 2, 3], [4, 5, 6]);
        expect(calls).toHaveLength(1);
        expect(calls[0].url).toBe("http://nav/session/plan");
        expect(calls[0].method).toBe("POST");
        expect(calls[0].body).toEqual({ entry: [1, 2, 3], target: [4, 5, 6] });
        expect(plan.length).toBe(5);
    });

    it("posts fiducial picks with their label", async () => {
        const { fetch, calls } = recordingFetch(() => [200, { pairs: 1, rmse: null, complete: false }]);
        const client = new SessionClient("", fetch);
        await client.addFiducial([10, -4, 2], "F1");
        expect(calls[0].url).toBe("/session/fiducial");
        expect(calls[0].body).toEqual({ image_point: [10, -4, 2], label: "F1" });
    });

    it("posts calibration pose batches untouched", async () => {
        const rows = [[1, 0, 0, 0, 1, 0, 0, 0, 1, 5, 6, 7]];
        const { fetch, calls } = recordingFetch(() => [200, { buffered: 1 }]);
        const client = new SessionClient("", fetch);
        await client.sendCalibrationPoses(rows);
        expect(calls[0].body).toEqual({ poses: rows });
    });
});

describe("error surface", () => {
    it("raises ApiError carrying the service detail", async () => {
        const { fetch } = recordingFetch(() => [422, { detail: "entry and target must be 1 mm apart" }]);
        const client = new SessionClient("", fetch);
        try {
            await client.setPlan([0, 0, 0], [0, 0, 0]);
            expect.unreachable("should have thrown");
        } catch (err) {
            expect(err).toBeInstanceOf(ApiError);
            expect((err as ApiError).status).toBe(422);
            expect((err as ApiError).message).toContain("1 mm apart");
        }
    });
});

describe("url building", () => {
    it("builds slice urls with only the set parameters", () => {
        const client = new SessionClient("http://nav");
        const url = client.sliceUrl({ axis: "coronal", index: 12, overlay: "comp_pet", opacity: 0.4 });
        expect(url).toBe("http://nav/slice?volume=interventional&axis=coronal&index=12&overlay=comp_pet&opacity=0.4");
        const bare = client.sliceUrl({ index: 3, overlay: null, opacity: 0 });
        expect(bare).toBe("http://nav/slice?volume=interventional&axis=axial&index=3&opacity=0");
    });

    it("keeps explicit window and level", () => {
        const client = new SessionClient("");
        const url = client.sliceUrl({ index: 0, window: 400, level: 40, opacity: 0.2 });
        expect(url).toContain("window=400");
        expect(url).toContain("level=40");
    });

    it("derives the guidance socket url from the base", () => {
        expect(new SessionClient("http://nav:8080").guidanceUrl()).toBe("ws://nav:8080/guidance");
        expect(new SessionClient("https://nav").guidanceUrl()).toBe("wss://nav/guidance");
    });
});
