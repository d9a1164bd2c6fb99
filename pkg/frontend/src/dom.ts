/** Small DOM helpers; rendering stays dumb and declarative. */

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

export function clear(node: HTMLElement): void {
  while (node.firstChild) node.removeChild(node.firstChild);
}

export function errorBanner(message: string, onRetry: () => void): HTMLElement {
  const retry = el("button", { class: "retry" }, ["retry"]);
  retry.addEventListener("click", onRetry);
  return el("div", { class: "banner error" }, [`API error: ${message} `, retry]);
}

export function fmt(value: number | null, digits = 3): string {
  if (value === null) return "–";
  return value.toFixed(digits);
}
