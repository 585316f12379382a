// Numeric guidance readouts and status banners, rendered from
// GuidancePanelState after every feed change.  Elements are created through
// the container's ownerDocument and kept as direct references, so the panel
// renders the same against a real DOM or a structural test double.

import { GuidancePanelState } from "./guidance.js";

export class GuidancePanel {
    readonly staleBanner: HTMLElement;
    readonly reconnectBanner: HTMLElement;
    readonly gateBanner: HTMLElement;
    readonly depthEl: HTMLElement;
    readonly lateralEl: HTMLElement;
    readonly angleEl: HTMLElement;
    readonly tipEl: HTMLElement;
    readonly historyEl: HTMLElement;

    constructor(container: HTMLElement) {
        const doc = container.ownerDocument;
        const make = (tag: string, className: string, text: string): HTMLElement => {
            const node = doc.createElement(tag);
            node.className = className;
            node.textContent = text;
            return node;
        };

        this.staleBanner = make("div", "banner stale", "STALE POSE");
        this.reconnectBanner = make("div", "banner reconnect", "reconnecting to guidance stream");
        this.gateBanner = make("div", "banner gate", "");
        this.staleBanner.hidden = true;
        this.reconnectBanner.hidden = true;
        this.gateBanner.hidden = true;
        container.appendChild(this.staleBanner);
        container.appendChild(this.reconnectBanner);
        container.appendChild(this.gateBanner);

        const list = make("dl", "readouts", "");
        const row = (label: string): HTMLElement => {
            list.appendChild(make("dt", "", label));
            const value = make("dd", "", "--");
            list.appendChild(value);
            return value;
        };
        this.depthEl = row("depth remaining");
        this.lateralEl = row("lateral deviation");
        this.angleEl = row("angle deviation");
        this.tipEl = row("tip (mm)");
        this.historyEl = row("ticks buffered");
        container.appendChild(list);
    }

    render(state: GuidancePanelState) {
        const tick = state.latest;
        if (tick) {
            this.depthEl.textContent = `${tick.depth_remaining.toFixed(1)} mm`;
            this.lateralEl.textContent = `${tick.lateral_deviation.toFixed(1)} mm`;
            this.angleEl.textContent = `${tick.angle_deviation.toFixed(1)} deg`;
            this.tipEl.textContent = tick.tip_image.map((x) => x.toFixed(1)).join(", ");
        }
        this.historyEl.textContent = String(state.history.length);
        this.staleBanner.hidden = !state.stale;
        this.reconnectBanner.hidden = state.connection !== "reconnecting";
        if (state.gateMessage) {
            this.gateBanner.textContent = state.gateMessage;
            this.gateBanner.hidden = false;
        } else {
            this.gateBanner.hidden = true;
        }
    }
}
