// Thin client for the navigation service.  All session mutations go through
// these endpoints; the viewer never duplicates engine logic locally.

import type { VolumeGeometry } from "./geometry.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface SessionSnapshot {
    id: string;
    steps: Record<string, string>;
    volume_paths: Record<string, string> | null;
    volumes: Record<string, VolumeGeometry> | null;
    registration: { mode: string; converged: boolean; final_mi: number } | null;
    tracker: { endpoint: string | null; pose_age: number | null };
    calibration_poses: number;
    tip_offset: number[] | null;
    fiducial_pairs: number;
    landmark_rmse: number | null;
    plan: { entry: number[]; target: number[]; length: number } | null;
}

export interface PlanResponse {
    entry: number[];
    target: number[];
    direction: number[];
    length: number;
}

export interface FiducialResponse {
    pairs: number;
    rmse: number | null;
    complete: boolean;
}

export interface SliceParams {
    volume?: string;
    axis?: string;
    index?: number;
    window?: number | null;
    level?: number | null;
    overlay?: string | null;
    opacity?: number;
}

export class ApiError extends Error {
    constructor(public status: number, detail: string) {
        super(detail);
    }
}

export class SessionClient {
    constructor(private baseUrl: string = "", private fetchImpl: FetchLike = fetch.bind(globalThis)) {}

    private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
        const init: RequestInit = { method, headers: { "Content-Type": "application/json" } };
        if (body !== undefined) {
            init.body = JSON.stringify(body);
        }
        const resp = await this.fetchImpl(this.baseUrl + path, init);
        if (!resp.ok) {
            let detail = resp.statusText;
            try {
                const parsed = await resp.json();
                if (parsed && parsed.detail) detail = String(parsed.detail);
            } catch {
                // non-JSON error body, keep the status text
            }
            throw new ApiError(resp.status, detail);
        }
        return resp.json() as Promise<T>;
    }

    getSession(): Promise<SessionSnapshot> {
        return this.request("GET", "/session");
    }

    setVolumes(compCt: string, compPet: string, interventional: string): Promise<SessionSnapshot> {
        return this.request("POST", "/session/volumes", {
            comp_ct: compCt,
            comp_pet: compPet,
            interventional: interventional,
        });
    }

    runRegistration(mode: string = "rigid"): Promise<{ converged: boolean; final_mi: number }> {
        return this.request("POST", "/session/registration", { mode });
    }

    connectTracking(host: string, port: number): Promise<SessionSnapshot> {
        return this.request("POST", "/session/tracking", { host, port });
    }

    sendCalibrationPoses(poses: number[][]): Promise<{ buffered: number }> {
        return this.request("POST", "/session/calibration/poses", { poses });
    }

    runCalibration(): Promise<{ tip_offset: number[]; rms_residual: number }> {
        return this.request("POST", "/session/calibration/run");
    }

    skipCalibration(): Promise<SessionSnapshot> {
        return this.request("POST", "/session/calibration/skip");
    }

    addFiducial(imagePoint: number[], label: string = ""): Promise<FiducialResponse> {
        return this.request("POST", "/session/fiducial", { image_point: imagePoint, label });
    }

    setPlan(entry: number[], target: number[]): Promise<PlanResponse> {
        return this.request("POST", "/session/plan", { entry, target });
    }

    sliceUrl(params: SliceParams): string {
        const q = new URLSearchParams();
        q.set("volume", params.volume ?? "interventional");
        q.set("axis", params.axis ?? "axial");
        q.set("index", String(params.index ?? 0));
        if (params.window != null) q.set("window", String(params.window));
        if (params.level != null) q.set("level", String(params.level));
        if (params.overlay) q.set("overlay", params.overlay);
        if (params.opacity !== undefined) q.set("opacity", String(params.opacity));
        return `${this.baseUrl}/slice?${q.toString()}`;
    }

    guidanceUrl(): string {
        const base = this.baseUrl || (typeof location !== "undefined" ? location.origin : "");
        return base.replace(/^http/, "ws") + "/guidance";
    }
}
