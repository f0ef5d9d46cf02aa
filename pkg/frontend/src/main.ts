import { Client } from "./api.js";
import { MixturePanel } from "./panel.js";
import { mount } from "./ui.js";

const client = new Client("");
const panel = new MixturePanel(client);
mount(document.getElementById("app")!, panel);
void panel.load();
