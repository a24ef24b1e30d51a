import { init } from "./app.js";

if (document.readyState === "loading") {
  document.addEventListener("DOMContentLoaded", () => void init(document));
} else {
  void init(document);
}
