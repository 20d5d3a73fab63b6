/** Lineage diagram: pure layout of a provenance subgraph, then SVG markup.
 *
 * PROV drawing conventions: entities are yellow ellipses, activities blue
 * rectangles, agents orange pentagons; edges are labeled with their
 * relation kind. The layout is layered by ancestor depth (ancestors to the
 * right), so derivation chains read left to right.
 */

import type { LineageGraph } from "./types.js";

export type NodeClass = "entity" | "activity" | "agent";

export interface LaidOutNode {
  id: string;
  nodeClass: NodeClass;
  label: string;
  x: number;
  y: number;
}

export interface LaidOutEdge {
  kind: string;
  source: string;
  target: string;
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

export interface Layout {
  nodes: LaidOutNode[];
  edges: LaidOutEdge[];
  width: number;
  height: number;
}

const ANCESTOR_KINDS = new Set([
  "wasGeneratedBy",
  "used",
  "wasDerivedFrom",
  "wasInformedBy",
]);

const COLUMN_WIDTH = 220;
const ROW_HEIGHT = 80;
const MARGIN = 60;

function nodeClassOf(graph: LineageGraph, id: string): NodeClass | null {
  if (id in graph.entities) return "entity";
  if (id in graph.activities) return "activity";
  if (id in graph.agents) return "agent";
  return null;
}

/** Longest ancestor-path depth per node (0 = the focus/leaf column). */
export function ancestorDepths(graph: LineageGraph): Map<string, number> {
  const out = new Map<string, string[]>();
  const ids = [
    ...Object.keys(graph.entities),
    ...Object.keys(graph.activities),
    ...Object.keys(graph.agents),
  ];
  for (const id of ids) out.set(id, []);
  for (const edge of graph.edges) {
    if (ANCESTOR_KINDS.has(edge.kind)) {
      out.get(edge.source)?.push(edge.target);
    }
  }
  const depths = new Map<string, number>();
  const visiting = new Set<string>();
  const depthOf = (id: string): number => {
    const cached = depths.get(id);
    if (cached !== undefined) return cached;
    if (visiting.has(id)) return 0; // defensive: exported lineage is acyclic
    visiting.add(id);
    const next = out.get(id) ?? [];
    const depth = next.length === 0 ? 0 : Math.max(...next.map(depthOf)) + 1;
    visiting.delete(id);
    depths.set(id, depth);
    return depth;
  };
  for (const id of ids) depthOf(id);
  // Flip so ancestors sit in higher columns than their descendants.
  const maxDepth = Math.max(0, ...depths.values());
  for (const [id, d] of depths) depths.set(id, maxDepth - d);
  return depths;
}

export function layoutLineage(graph: LineageGraph): Layout {
  const depths = ancestorDepths(graph);
  const columns = new Map<number, string[]>();
  const agentIds = new Set(Object.keys(graph.agents));
  for (const [id, depth] of [...depths.entries()].sort((a, b) =>
    a[0].localeCompare(b[0])
  )) {
    if (agentIds.has(id)) continue; // agents ride below their activities
    const column = columns.get(depth) ?? [];
    column.push(id);
    columns.set(depth, column);
  }
  const positions = new Map<string, { x: number; y: number }>();
  let maxRows = 0;
  for (const [depth, ids] of columns) {
    ids.forEach((id, row) => {
      positions.set(id, {
        x: MARGIN + depth * COLUMN_WIDTH,
        y: MARGIN + row * ROW_HEIGHT,
      });
    });
    maxRows = Math.max(maxRows, ids.length);
  }
  // Agents go on a bottom band, one slot each, in sorted order.
  [...agentIds].sort().forEach((id, i) => {
    positions.set(id, {
      x: MARGIN + i * COLUMN_WIDTH,
      y: MARGIN + (maxRows + 1) * ROW_HEIGHT,
    });
  });

  const nodes: LaidOutNode[] = [];
  for (const [id, pos] of positions) {
    const nodeClass = nodeClassOf(graph, id);
    if (!nodeClass) continue;
    nodes.push({ id, nodeClass, label: id, x: pos.x, y: pos.y });
  }
  const edges: LaidOutEdge[] = [];
  for (const edge of graph.edges) {
    const from = positions.get(edge.source);
    const to = positions.get(edge.target);
    if (!from || !to) continue;
    edges.push({
      kind: edge.kind,
      source: edge.source,
      target: edge.target,
      x1: from.x,
      y1: from.y,
      x2: to.x,
      y2: to.y,
    });
  }
  const width = MARGIN * 2 + (Math.max(0, ...depths.values()) + 1) * COLUMN_WIDTH;
  const height = MARGIN * 2 + (maxRows + 2) * ROW_HEIGHT;
  return { nodes, edges, width, height };
}

function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function shapeFor(node: LaidOutNode): string {
  const label = `<text x="${node.x}" y="${node.y + 4}" text-anchor="middle" class="node-label">${escapeXml(
    node.label.length > 26 ? node.label.slice(0, 25) + "…" : node.label
  )}</text>`;
  if (node.nodeClass === "entity") {
    return `<ellipse cx="${node.x}" cy="${node.y}" rx="95" ry="24" class="entity"/>${label}`;
  }
  if (node.nodeClass === "activity") {
    return `<rect x="${node.x - 95}" y="${node.y - 22}" width="190" height="44" rx="4" class="activity"/>${label}`;
  }
  const { x, y } = node;
  const points = `${x - 70},${y + 18} ${x - 70},${y - 8} ${x},${y - 24} ${x + 70},${y - 8} ${x + 70},${y + 18}`;
  return `<polygon points="${points}" class="agent"/>${label}`;
}

/** Render the layout to an SVG string; node/edge counts equal the payload's. */
export function renderLineageSvg(graph: LineageGraph): string {
  const layout = layoutLineage(graph);
  if (layout.nodes.length === 0) {
    return `<svg xmlns="http://www.w3.org/2000/svg" width="400" height="80"><text x="20" y="45" class="empty">nothing to show: the lineage is empty</text></svg>`;
  }
  const edgeMarkup = layout.edges
    .map(
      (e) =>
        `<g class="edge"><line x1="${e.x1}" y1="${e.y1}" x2="${e.x2}" y2="${e.y2}" marker-end="url(#arrow)"/>` +
        `<text x="${(e.x1 + e.x2) / 2}" y="${(e.y1 + e.y2) / 2 - 6}" text-anchor="middle" class="edge-label">${escapeXml(e.kind)}</text></g>`
    )
    .join("");
  const nodeMarkup = layout.nodes.map(shapeFor).join("");
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${layout.width} ${layout.height}" width="${layout.width}" height="${layout.height}">` +
    `<defs><marker id="arrow" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="7" markerHeight="7" orient="auto-start-reverse"><path d="M 0 0 L 10 5 L 0 10 z"/></marker></defs>` +
    `<style>.entity{fill:#fff3b8;stroke:#b3a14c}.activity{fill:#cfe3ff;stroke:#5c83b8}.agent{fill:#ffd9a8;stroke:#c08a3e}` +
    `.node-label{font:12px sans-serif}.edge line{stroke:#666}.edge-label{font:10px sans-serif;fill:#666}.empty{font:14px sans-serif;fill:#888}</style>` +
    edgeMarkup +
    nodeMarkup +
    `</svg>`
  );
}

export function countsOf(graph: LineageGraph): { nodes: number; edges: number } {
  return {
    nodes:
      Object.keys(graph.entities).length +
      Object.keys(graph.activities).length +
      Object.keys(graph.agents).length,
    edges: graph.edges.length,
  };
}
