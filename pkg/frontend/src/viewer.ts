/** Three.js rendering layer: one point cloud with orbit controls. */

import * as THREE from 'three';
import { OrbitControls } from 'three/examples/jsm/controls/OrbitControls.js';

import type { ScenePoints } from './api.js';

export class PointCloudViewer {
  private readonly renderer: THREE.WebGLRenderer;
  private readonly scene = new THREE.Scene();
  private readonly camera: THREE.PerspectiveCamera;
  private readonly controls: OrbitControls;
  private points: THREE.Points | null = null;

  constructor(private readonly container: HTMLElement) {
    this.renderer = new THREE.WebGLRenderer({ antialias: true });
    this.renderer.setPixelRatio(window.devicePixelRatio);
    this.scene.background = new THREE.Color(0x10141a);
    this.camera = new THREE.PerspectiveCamera(60, 1, 0.01, 1000);
    this.camera.position.set(6, 6, 6);
    this.controls = new OrbitControls(this.camera, this.renderer.domElement);
    this.controls.enableDamping = true;
    container.appendChild(this.renderer.domElement);
    window.addEventListener('resize', () => this.resize());
    this.resize();
    this.renderer.setAnimationLoop(() => {
      this.controls.update();
      this.renderer.render(this.scene, this.camera);
    });
  }

  private resize(): void {
    const w = this.container.clientWidth || 800;
    const h = this.container.clientHeight || 600;
    this.renderer.setSize(w, h);
    this.camera.aspect = w / h;
    this.camera.updateProjectionMatrix();
  }

  setScene(data: ScenePoints): void {
    if (this.points) {
      this.scene.remove(this.points);
      this.points.geometry.dispose();
      (this.points.material as THREE.Material).dispose();
      this.points = null;
    }
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute('position', new THREE.BufferAttribute(data.positions, 3));
    geometry.setAttribute('color', new THREE.BufferAttribute(colorsToFloat(data.colors), 3));
    geometry.computeBoundingSphere();
    const material = new THREE.PointsMaterial({ size: 0.05, vertexColors: true });
    this.points = new THREE.Points(geometry, material);
    this.scene.add(this.points);
    const sphere = geometry.boundingSphere;
    if (sphere) {
      this.controls.target.copy(sphere.center);
      this.camera.position.copy(sphere.center.clone().addScalar(sphere.radius * 1.8));
    }
  }

  setColors(colors: Uint8Array): void {
    if (!this.points) return;
    this.points.geometry.setAttribute('color', new THREE.BufferAttribute(colorsToFloat(colors), 3));
    this.points.geometry.attributes.color.needsUpdate = true;
  }
}

function colorsToFloat(colors: Uint8Array): Float32Array {
  const out = new Float32Array(colors.length);
  for (let i = 0; i < colors.length; i++) out[i] = colors[i] / 255;
  return out;
}
