import { ApiClient } from './api.js';
import { App } from './view.js';

// service base URL: ?api=http://host:port beats the same-origin default
const params = new URLSearchParams(window.location.search);
const base = params.get('api') ?? window.location.origin;

const root = document.querySelector<HTMLElement>('#app');
if (root) {
  const app = new App(root, new ApiClient(base));
  app.init();
}
